//! Dense 3-D grids: intensity volumes, label maps and landmark sets.
//!
//! Every grid uses the same row-major layout with the last axis fastest:
//! `index = (h·W + w)·D + d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

#[inline]
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn linear_index(shape: Shape3, h: usize, w: usize, d: usize) -> usize {
    (h * shape[1] + w) * shape[2] + d
}

fn check_spacing(spacing: Spacing3) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")))
    }
}

fn check_shape(shape: Shape3, len: usize, per_voxel: usize) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::shape(format!("zero-sized axis in {shape:?}")));
    }
    let expected = voxel_count(shape) * per_voxel;
    if expected != len {
        return Err(Error::shape(format!(
            "shape {shape:?} x {per_voxel} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: Spacing3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: Spacing3, data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len(), 1)?;
        check_spacing(spacing)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, spacing: [1.0; 3], data: vec![0.0; voxel_count(shape)] }
    }

    /// Volume filled by evaluating `f(h, w, d)` at every voxel.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Self { shape, spacing: [1.0; 3], data }
    }

    pub fn with_spacing(mut self, spacing: Spacing3) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[linear_index(self.shape, h, w, d)]
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Min-max rescale to [0, 1]. Constant volumes map to all zeros.
    pub fn normalize(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume { shape: self.shape, spacing: self.spacing, data }
    }
}

/// Integer label map; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: Shape3,
    spacing: Spacing3,
    data: Vec<u16>,
    n_labels: u16,
}

impl LabelMap {
    /// `n_labels` is taken as the largest label present.
    pub fn new(shape: Shape3, spacing: Spacing3, data: Vec<u16>) -> Result<Self> {
        check_shape(shape, data.len(), 1)?;
        check_spacing(spacing)?;
        let n_labels = data.iter().copied().max().unwrap_or(0);
        Ok(Self { shape, spacing, data, n_labels })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        let n_labels = data.iter().copied().max().unwrap_or(0);
        Self { shape, spacing: [1.0; 3], data, n_labels }
    }

    /// Declared label count; must cover every value present.
    pub fn with_n_labels(mut self, n_labels: u16) -> Result<Self> {
        if n_labels < self.n_labels {
            return Err(Error::invalid(format!(
                "n_labels {n_labels} below largest label {}",
                self.n_labels
            )));
        }
        self.n_labels = n_labels;
        Ok(self)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn n_labels(&self) -> u16 {
        self.n_labels
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u16 {
        self.data[linear_index(self.shape, h, w, d)]
    }

    /// Foreground one-hot encoding, `[voxel][label-1]`, for labels `1..=n`.
    pub fn one_hot(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len() * n];
        for (i, &l) in self.data.iter().enumerate() {
            let l = l as usize;
            if l >= 1 && l <= n {
                out[i * n + l - 1] = 1.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    /// (h, w, d) in voxel coordinates.
    pub point: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        let mut ids: Vec<u32> = points.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate landmark id"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Landmark> {
        self.points.iter().find(|p| p.id == id)
    }

    pub fn in_bounds(&self, shape: Shape3) -> bool {
        self.points.iter().all(|p| {
            p.point.iter().zip(shape).all(|(&x, n)| x >= 0.0 && x <= (n - 1) as f64)
        })
    }
}
