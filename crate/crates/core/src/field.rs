//! Displacement fields: spatial-transformer warping, Jacobian folding
//! statistics and landmark error.
//!
//! A field stores `u(x)` in voxel units with components `(u_h, u_w, u_d)`
//! interleaved after the last spatial axis. The transform is
//! `φ(x) = x + u(x)` and warping samples the source at `φ(x)`. Sample
//! coordinates outside the grid are clamped to the border.

use crate::error::{Error, Result};
use crate::graph::{Graph, Real, Tensor, Var};
use crate::volume::{voxel_count, LabelMap, LandmarkSet, Shape3, Spacing3, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    shape: Shape3,
    spacing: Spacing3,
    data: Vec<f32>,
}

impl DeformationField {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) || data.len() != voxel_count(shape) * 3 {
            return Err(Error::shape(format!(
                "field {shape:?} needs {} values, got {}",
                voxel_count(shape) * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite displacement"));
        }
        Ok(Self { shape, spacing: [1.0; 3], data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, spacing: [1.0; 3], data: vec![0.0; voxel_count(shape) * 3] }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape) * 3);
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.extend_from_slice(&f(h, w, d));
                }
            }
        }
        Self { shape, spacing: [1.0; 3], data }
    }

    pub fn from_real(shape: Shape3, data: &[Real]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn with_spacing(mut self, spacing: Spacing3) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_real(&self) -> Vec<Real> {
        self.data.iter().map(|&v| v as Real).collect()
    }

    pub fn at(&self, h: usize, w: usize, d: usize) -> [f32; 3] {
        let i = ((h * self.shape[1] + w) * self.shape[2] + d) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

// ---------------------------------------------------------------------------
// Sampling kernels
// ---------------------------------------------------------------------------

/// Lower corner index and fractional offset for a clamped coordinate on an
/// axis of length `n`, plus whether the coordinate was clamped.
#[inline]
fn axis_cell(p: Real, n: usize) -> (usize, Real, bool) {
    let max = (n - 1) as Real;
    let clamped = p < 0.0 || p > max;
    let p = p.clamp(0.0, max);
    if n == 1 {
        return (0, 0.0, clamped);
    }
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, p - i0 as Real, clamped)
}

#[inline]
fn axis_nearest(p: Real, n: usize) -> usize {
    p.round().clamp(0.0, (n - 1) as Real) as usize
}

struct Cell {
    base: [usize; 3],
    frac: [Real; 3],
    clamped: [bool; 3],
}

#[inline]
fn cell(shape: Shape3, p: [Real; 3]) -> Cell {
    let (h0, fh, ch) = axis_cell(p[0], shape[0]);
    let (w0, fw, cw) = axis_cell(p[1], shape[1]);
    let (d0, fd, cd) = axis_cell(p[2], shape[2]);
    Cell { base: [h0, w0, d0], frac: [fh, fw, fd], clamped: [ch, cw, cd] }
}

/// Offsets of the eight corners with their (1 - f) / f multipliers.
#[inline]
fn corners(shape: Shape3, c: &Cell) -> [(usize, [bool; 3]); 8] {
    let step = |a: usize| if shape[a] > 1 { 1 } else { 0 };
    let (sh, sw, sd) = (step(0), step(1), step(2));
    let mut out = [(0, [false; 3]); 8];
    for (k, slot) in out.iter_mut().enumerate() {
        let hi = [k & 4 != 0, k & 2 != 0, k & 1 != 0];
        let h = c.base[0] + if hi[0] { sh } else { 0 };
        let w = c.base[1] + if hi[1] { sw } else { 0 };
        let d = c.base[2] + if hi[2] { sd } else { 0 };
        *slot = ((h * shape[1] + w) * shape[2] + d, hi);
    }
    out
}

#[inline]
fn corner_weight(frac: [Real; 3], hi: [bool; 3]) -> Real {
    (0..3).map(|a| if hi[a] { frac[a] } else { 1.0 - frac[a] }).product()
}

/// Channel-last trilinear warp of `src` (`[voxels][channels]`) by `disp`.
pub(crate) fn warp_forward(shape: Shape3, channels: usize, src: &[Real], disp: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; voxel_count(shape) * channels];
    let mut i = 0;
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let u = &disp[i * 3..i * 3 + 3];
                let c = cell(shape, [h as Real + u[0], w as Real + u[1], d as Real + u[2]]);
                let dst = &mut out[i * channels..(i + 1) * channels];
                for (off, hi) in corners(shape, &c) {
                    let wgt = corner_weight(c.frac, hi);
                    if wgt != 0.0 {
                        let s = &src[off * channels..(off + 1) * channels];
                        dst.iter_mut().zip(s).for_each(|(o, v)| *o += wgt * v);
                    }
                }
                i += 1;
            }
        }
    }
    out
}

/// Gradients of the trilinear warp w.r.t. source values and displacement.
fn warp_backward(
    shape: Shape3,
    channels: usize,
    src: &[Real],
    disp: &[Real],
    grad: &[Real],
    need_src: bool,
    need_disp: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let mut gsrc = need_src.then(|| vec![0.0; src.len()]);
    let mut gdisp = need_disp.then(|| vec![0.0; disp.len()]);
    let mut i = 0;
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let u = &disp[i * 3..i * 3 + 3];
                let c = cell(shape, [h as Real + u[0], w as Real + u[1], d as Real + u[2]]);
                let g = &grad[i * channels..(i + 1) * channels];
                let mut du = [0.0; 3];
                for (off, hi) in corners(shape, &c) {
                    let s = &src[off * channels..(off + 1) * channels];
                    if let Some(gs) = gsrc.as_mut() {
                        let wgt = corner_weight(c.frac, hi);
                        gs[off * channels..(off + 1) * channels]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += wgt * b);
                    }
                    if gdisp.is_some() {
                        let gdotv: Real = g.iter().zip(s).map(|(a, b)| a * b).sum();
                        for a in 0..3 {
                            if c.clamped[a] || shape[a] == 1 {
                                continue;
                            }
                            let mut dw = if hi[a] { 1.0 } else { -1.0 };
                            for b in 0..3 {
                                if b != a {
                                    dw *= if hi[b] { c.frac[b] } else { 1.0 - c.frac[b] };
                                }
                            }
                            du[a] += dw * gdotv;
                        }
                    }
                }
                if let Some(gd) = gdisp.as_mut() {
                    gd[i * 3..i * 3 + 3].copy_from_slice(&du);
                }
                i += 1;
            }
        }
    }
    (gsrc, gdisp)
}

/// Differentiable trilinear warp. `src` is `[H, W, D, C]`, `disp` is
/// `[H, W, D, 3]`; output has the shape of `src`.
pub fn warp_var(g: &mut Graph, src: Var, disp: Var) -> Result<Var> {
    let ss = g.shape(src).to_vec();
    let ds = g.shape(disp).to_vec();
    if ss.len() != 4 || ds.len() != 4 || ss[..3] != ds[..3] || ds[3] != 3 {
        return Err(Error::shape(format!("warp: source {ss:?} vs field {ds:?}")));
    }
    let shape = [ss[0], ss[1], ss[2]];
    let channels = ss[3];
    let out = warp_forward(shape, channels, g.value(src).data(), g.value(disp).data());
    Ok(g.push(
        Tensor::new(ss, out),
        &[src, disp],
        Box::new(move |inp, _, grad, needs| {
            let (gs, gd) =
                warp_backward(shape, channels, inp[0].data(), inp[1].data(), grad, needs[0], needs[1]);
            vec![gs, gd]
        }),
    ))
}

fn check_same(a: Shape3, b: Shape3, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(format!("{what}: {a:?} vs field {b:?}")))
    }
}

/// Resample `v` at `x + u(x)`.
pub fn warp(v: &Volume, f: &DeformationField, interp: Interp) -> Result<Volume> {
    check_same(v.shape(), f.shape(), "warp")?;
    let shape = v.shape();
    let data = match interp {
        Interp::Trilinear => warp_forward(shape, 1, &v.to_real(), &f.to_real())
            .into_iter()
            .map(|x| x as f32)
            .collect(),
        Interp::Nearest => nearest_indices(f).into_iter().map(|j| v.data()[j]).collect(),
    };
    Volume::new(shape, v.spacing(), data)
}

fn nearest_indices(f: &DeformationField) -> Vec<usize> {
    let shape = f.shape();
    let mut out = Vec::with_capacity(voxel_count(shape));
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let u = f.at(h, w, d);
                let sh = axis_nearest(h as Real + u[0] as Real, shape[0]);
                let sw = axis_nearest(w as Real + u[1] as Real, shape[1]);
                let sd = axis_nearest(d as Real + u[2] as Real, shape[2]);
                out.push((sh * shape[1] + sw) * shape[2] + sd);
            }
        }
    }
    out
}

/// Nearest-neighbour label resampling.
pub fn warp_labels(s: &LabelMap, f: &DeformationField) -> Result<LabelMap> {
    check_same(s.shape(), f.shape(), "warp_labels")?;
    let data = nearest_indices(f).into_iter().map(|j| s.data()[j]).collect();
    LabelMap::new(s.shape(), s.spacing(), data)?.with_n_labels(s.n_labels())
}

/// Trilinear sample of the displacement at a continuous voxel coordinate.
pub fn sample_displacement(f: &DeformationField, p: [Real; 3]) -> [Real; 3] {
    let shape = f.shape();
    let c = cell(shape, p);
    let mut out = [0.0; 3];
    for (off, hi) in corners(shape, &c) {
        let wgt = corner_weight(c.frac, hi);
        for a in 0..3 {
            out[a] += wgt * f.data()[off * 3 + a] as Real;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Jacobian statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianStats {
    /// Percentage of interior voxels with det(J) <= 0.
    pub neg_fraction: f64,
    pub min_det: f64,
    pub mean_det: f64,
}

/// Determinant of `J_φ = I + ∇u` at every interior voxel (central differences),
/// in interior raster order.
pub fn jacobian_determinants(f: &DeformationField) -> Result<Vec<f64>> {
    let s = f.shape();
    if s.iter().any(|&n| n < 3) {
        return Err(Error::shape(format!("jacobian needs >= 3 voxels per axis, got {s:?}")));
    }
    let u = |h: usize, w: usize, d: usize, c: usize| f.data()[((h * s[1] + w) * s[2] + d) * 3 + c] as f64;
    let mut dets = Vec::with_capacity((s[0] - 2) * (s[1] - 2) * (s[2] - 2));
    for h in 1..s[0] - 1 {
        for w in 1..s[1] - 1 {
            for d in 1..s[2] - 1 {
                let mut j = [[0.0; 3]; 3];
                for c in 0..3 {
                    j[c][0] = 0.5 * (u(h + 1, w, d, c) - u(h - 1, w, d, c));
                    j[c][1] = 0.5 * (u(h, w + 1, d, c) - u(h, w - 1, d, c));
                    j[c][2] = 0.5 * (u(h, w, d + 1, c) - u(h, w, d - 1, c));
                    j[c][c] += 1.0;
                }
                dets.push(det3(&j));
            }
        }
    }
    Ok(dets)
}

/// Cofactor expansion along the first row.
pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn jacobian_stats(f: &DeformationField) -> Result<JacobianStats> {
    let dets = jacobian_determinants(f)?;
    let n = dets.len() as f64;
    let neg = dets.iter().filter(|&&d| d <= 0.0).count() as f64;
    Ok(JacobianStats {
        neg_fraction: 100.0 * neg / n,
        min_det: dets.iter().copied().fold(f64::INFINITY, f64::min),
        mean_det: dets.iter().sum::<f64>() / n,
    })
}

// ---------------------------------------------------------------------------
// Target registration error
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

/// Landmark error in mm: the field carries fixed-space points into moving
/// space, so each error is `‖(p_fixed + u(p_fixed)) − p_moving‖` with the
/// difference scaled by `spacing`.
pub fn tre(
    moving: &LandmarkSet,
    fixed: &LandmarkSet,
    f: &DeformationField,
    spacing: Spacing3,
) -> Result<TreStats> {
    if moving.len() != fixed.len() {
        return Err(Error::invalid(format!(
            "landmark count mismatch: {} moving vs {} fixed",
            moving.len(),
            fixed.len()
        )));
    }
    let mut errors = Vec::with_capacity(fixed.len());
    for pf in &fixed.points {
        let pm = moving
            .get(pf.id)
            .ok_or_else(|| Error::invalid(format!("landmark id {} missing from moving set", pf.id)))?;
        let u = sample_displacement(f, pf.point);
        let dist2: f64 = (0..3)
            .map(|a| ((pf.point[a] + u[a] - pm.point[a]) * spacing[a]).powi(2))
            .sum();
        errors.push(dist2.sqrt());
    }
    if errors.is_empty() {
        return Ok(TreStats { mean: 0.0, sd: 0.0 });
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(TreStats { mean, sd })
}
