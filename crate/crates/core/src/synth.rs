//! Synthetic anatomies and smooth ground-truth deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{sample_displacement, DeformationField};
use crate::volume::{voxel_count, LabelMap, Landmark, LandmarkSet, Shape3, Volume};

/// Blob core threshold on the unit-amplitude Gaussian profile.
pub const LABEL_THRESHOLD: f64 = 0.2;
/// Minimum centre spacing, in blob standard deviations.
const MIN_SEPARATION: f64 = 2.5;
/// Minimum distance from the border, in blob standard deviations.
const BORDER_MARGIN: f64 = 2.0;
const PLACEMENT_TRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelMap,
    pub landmarks: LandmarkSet,
}

/// Sum of `n_labels` Gaussian blobs (std = size/8 per axis) with
/// well-separated peaks, normalized to [0, 1]. Label `k` marks voxels where
/// blob `k` dominates and its profile exceeds [`LABEL_THRESHOLD`]; the
/// landmarks are the blob centres.
pub fn gen_phantom(seed: u64, size: Shape3, n_labels: usize) -> Result<Phantom> {
    if n_labels == 0 {
        return Err(Error::invalid("n_labels must be >= 1"));
    }
    if n_labels > u16::MAX as usize {
        return Err(Error::invalid("too many labels"));
    }
    if size.iter().any(|&n| n < 8) {
        return Err(Error::invalid(format!("phantom size must be >= 8 per axis, got {size:?}")));
    }
    let sigma = size.map(|n| n as f64 / 8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centres: Vec<[f64; 3]> = Vec::with_capacity(n_labels);
    let mut tries = 0;
    while centres.len() < n_labels {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(Error::invalid(format!(
                "cannot place {n_labels} separated blobs in a {size:?} grid"
            )));
        }
        let c: [f64; 3] = std::array::from_fn(|a| {
            let lo = BORDER_MARGIN * sigma[a];
            let hi = (size[a] - 1) as f64 - BORDER_MARGIN * sigma[a];
            rng.random_range(lo..=hi)
        });
        let separated = centres.iter().all(|o| {
            let d2: f64 = (0..3).map(|a| ((c[a] - o[a]) / sigma[a]).powi(2)).sum();
            d2 >= MIN_SEPARATION * MIN_SEPARATION
        });
        if separated {
            centres.push(c);
        }
    }
    let amps: Vec<f64> = (0..n_labels).map(|_| rng.random_range(0.5..=1.0)).collect();

    let n = voxel_count(size);
    let mut intensity = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for h in 0..size[0] {
        for w in 0..size[1] {
            for d in 0..size[2] {
                let p = [h as f64, w as f64, d as f64];
                let mut total = 0.0;
                let mut best = (0usize, f64::NEG_INFINITY, 0.0);
                for (k, c) in centres.iter().enumerate() {
                    let r2: f64 = (0..3).map(|a| ((p[a] - c[a]) / sigma[a]).powi(2)).sum();
                    let profile = (-0.5 * r2).exp();
                    let contrib = amps[k] * profile;
                    total += contrib;
                    if contrib > best.1 {
                        best = (k, contrib, profile);
                    }
                }
                intensity.push(total as f32);
                labels.push(if best.2 > LABEL_THRESHOLD { best.0 as u16 + 1 } else { 0 });
            }
        }
    }
    let image = Volume::new(size, [1.0; 3], intensity)?.normalize();
    let labels = LabelMap::new(size, [1.0; 3], labels)?.with_n_labels(n_labels as u16)?;
    let landmarks = LandmarkSet::new(
        centres.iter().enumerate().map(|(k, &c)| Landmark { id: k as u32 + 1, point: c }).collect(),
    )?;
    Ok(Phantom { image, labels, landmarks })
}

/// Separable Gaussian blur of one scalar channel with periodic boundaries.
fn gaussian_blur(data: &mut [f64], shape: Shape3, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..len).map(|t| data[base + t * stride]));
                for t in 0..len {
                    let mut acc = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let src = (t as isize + ki as isize - radius).rem_euclid(len as isize) as usize;
                        acc += kv * line[src];
                    }
                    data[base + t * stride] = acc;
                }
            }
        }
    }
}

/// White noise per component, blurred with std `sigma`, rescaled so the
/// largest component magnitude equals `max_disp`.
pub fn gen_smooth_field(seed: u64, size: Shape3, max_disp: f64, sigma: f64) -> Result<DeformationField> {
    if !(max_disp >= 0.0 && max_disp.is_finite()) {
        return Err(Error::invalid(format!("max_disp must be >= 0, got {max_disp}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if size.iter().any(|&n| n == 0) {
        return Err(Error::invalid("empty field"));
    }
    let n = voxel_count(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for c in comps.iter_mut() {
        gaussian_blur(c, size, sigma);
    }
    let peak = comps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { max_disp / peak } else { 0.0 };
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in &comps {
            data.push((c[i] * scale) as f32);
        }
    }
    DeformationField::new(size, data)
}

/// Moving-space positions of fixed-space landmarks for a moving image
/// generated as `moving(y) = fixed(y + g(y))`: solves `q + g(q) = p` by
/// fixed-point iteration, clamped to the grid.
pub fn map_landmarks_to_moving(fixed: &LandmarkSet, g: &DeformationField) -> LandmarkSet {
    let shape = g.shape();
    let points = fixed
        .points
        .iter()
        .map(|lm| {
            let p = lm.point;
            let mut q = p;
            for _ in 0..50 {
                let u = sample_displacement(g, q);
                q = std::array::from_fn(|a| (p[a] - u[a]).clamp(0.0, (shape[a] - 1) as f64));
            }
            Landmark { id: lm.id, point: q }
        })
        .collect();
    LandmarkSet { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::jacobian_stats;

    #[test]
    fn phantom_contract() {
        let p = gen_phantom(7, [32, 32, 32], 4).unwrap();
        assert_eq!(p.landmarks.len(), 4);
        let mut present: Vec<u16> = p.labels.data().to_vec();
        present.sort_unstable();
        present.dedup();
        assert_eq!(present, vec![0, 1, 2, 3, 4]);
        assert_eq!(p.labels.n_labels(), 4);
        assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.landmarks.in_bounds([32, 32, 32]));
    }

    #[test]
    fn phantom_is_deterministic() {
        assert_eq!(gen_phantom(3, [16, 20, 24], 3).unwrap(), gen_phantom(3, [16, 20, 24], 3).unwrap());
        assert_ne!(gen_phantom(3, [16, 16, 16], 1).unwrap(), gen_phantom(4, [16, 16, 16], 1).unwrap());
    }

    #[test]
    fn single_blob_centroid_matches_landmark() {
        for seed in 0..5 {
            let p = gen_phantom(seed, [16, 16, 16], 1).unwrap();
            let (mut sum, mut count) = ([0.0; 3], 0.0);
            for h in 0..16 {
                for w in 0..16 {
                    for d in 0..16 {
                        if p.labels.get(h, w, d) == 1 {
                            sum[0] += h as f64;
                            sum[1] += w as f64;
                            sum[2] += d as f64;
                            count += 1.0;
                        }
                    }
                }
            }
            let c = p.landmarks.points[0].point;
            let dist = (0..3).map(|a| (sum[a] / count - c[a]).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= 1.0, "seed {seed}: centroid {dist} voxels from landmark");
        }
    }

    #[test]
    fn phantom_rejects_impossible_requests() {
        assert!(gen_phantom(0, [8, 8, 8], 40).is_err());
        assert!(gen_phantom(0, [7, 8, 8], 1).is_err());
        assert!(gen_phantom(0, [8, 8, 8], 0).is_err());
    }

    #[test]
    fn smooth_field_scaling() {
        assert!(gen_smooth_field(1, [8, 8, 8], 0.0, 2.0).unwrap().data().iter().all(|&v| v == 0.0));
        for seed in 0..3 {
            let f = gen_smooth_field(seed, [12, 10, 8], 3.0, 2.0).unwrap();
            assert!((f.max_abs() - 3.0).abs() <= 1e-5);
        }
        assert_eq!(gen_smooth_field(5, [8, 8, 8], 1.0, 1.0).unwrap(), gen_smooth_field(5, [8, 8, 8], 1.0, 1.0).unwrap());
        assert!(gen_smooth_field(5, [8, 8, 8], 1.0, 0.0).is_err());
        assert!(gen_smooth_field(5, [8, 8, 8], -1.0, 1.0).is_err());
    }

    #[test]
    fn gentle_smooth_fields_do_not_fold() {
        for seed in 0..4 {
            let f = gen_smooth_field(seed, [32, 32, 32], 2.0, 4.0).unwrap();
            assert_eq!(jacobian_stats(&f).unwrap().neg_fraction, 0.0, "seed {seed}");
        }
    }

    #[test]
    fn landmark_inverse_satisfies_forward_map() {
        let g = gen_smooth_field(2, [16, 16, 16], 2.0, 3.0).unwrap();
        let fixed = LandmarkSet::new(vec![Landmark { id: 0, point: [7.3, 8.0, 6.5] }]).unwrap();
        let moving = map_landmarks_to_moving(&fixed, &g);
        let q = moving.points[0].point;
        let u = sample_displacement(&g, q);
        for a in 0..3 {
            assert!((q[a] + u[a] - fixed.points[0].point[a]).abs() < 1e-6);
        }
    }
}
