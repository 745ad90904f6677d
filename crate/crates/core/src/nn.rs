//! Parameterized layers shared by the encoder and decoder.
//!
//! Feature maps are channel-last: a grid of `[H, W, D]` positions with `C`
//! contiguous channels each.

use rand::Rng;

use crate::graph::{axpy, dot, Graph, Real, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init.sample(vec![n_out, n_in], rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![n_out]));
        Self { w, b, n_in, n_out }
    }

    /// A linear layer whose weight is stored with an arbitrary shape that
    /// flattens to `[n_out, n_in]` (e.g. a patchifying convolution kernel).
    pub fn with_weight_shape(
        store: &mut ParamStore,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let n_out = shape[0];
        let n_in = shape[1..].iter().product();
        let w = store.add(format!("{name}.w"), init.sample(shape, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![n_out]));
        Self { w, b, n_in, n_out }
    }

    pub fn param_count(n_in: usize, n_out: usize) -> usize {
        n_in * n_out + n_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut w = p.var(self.w);
        if g.shape(w).len() != 2 {
            w = g.reshape(w, vec![self.n_out, self.n_in]);
        }
        g.linear(x, w, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: Real = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::filled(vec![c], 1.0));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(vec![c]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// 3×3×3 convolution, stride 1, zero padding 1. Weight layout
/// `[C_out, C_in, 3, 3, 3]`.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init.sample(vec![c_out, c_in, 3, 3, 3], rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Self { w, b, c_in, c_out }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        27 * c_in * c_out + c_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        conv3(g, x, p.var(self.w), p.var(self.b))
    }
}

const TAPS: [[isize; 3]; 27] = {
    let mut t = [[0isize; 3]; 27];
    let mut k = 0;
    while k < 27 {
        t[k] = [(k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1];
        k += 1;
    }
    t
};

/// Source voxel for output `(h, w, d)` and tap `k`, if inside the grid.
#[inline]
fn tap_source(dims: [usize; 3], h: usize, w: usize, d: usize, k: usize) -> Option<usize> {
    let t = TAPS[k];
    let hh = h as isize + t[0];
    let ww = w as isize + t[1];
    let dd = d as isize + t[2];
    if hh < 0 || ww < 0 || dd < 0 || hh >= dims[0] as isize || ww >= dims[1] as isize || dd >= dims[2] as isize {
        return None;
    }
    Some((hh as usize * dims[1] + ww as usize) * dims[2] + dd as usize)
}

/// `[C_out, C_in, 27]` to `[27, C_in, C_out]`.
fn to_tap_major(w: &[Real], c_in: usize, c_out: usize) -> Vec<Real> {
    let mut out = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..27 {
                out[(k * c_in + ci) * c_out + co] = w[(co * c_in + ci) * 27 + k];
            }
        }
    }
    out
}

fn from_tap_major(wk: &[Real], c_in: usize, c_out: usize) -> Vec<Real> {
    let mut out = vec![0.0; wk.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..27 {
                out[(co * c_in + ci) * 27 + k] = wk[(k * c_in + ci) * c_out + co];
            }
        }
    }
    out
}

pub fn conv3(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    assert_eq!(xs.len(), 4, "conv3 expects [H, W, D, C]");
    assert_eq!(ws[2..], [3, 3, 3], "conv3 kernel must be 3x3x3");
    let (c_out, c_in) = (ws[0], ws[1]);
    assert_eq!(xs[3], c_in, "conv3 channel mismatch");
    let dims = [xs[0], xs[1], xs[2]];
    let n = dims[0] * dims[1] * dims[2];
    let wk = to_tap_major(g.value(w).data(), c_in, c_out);
    let mut y = vec![0.0; n * c_out];
    {
        let xv = g.value(x).data();
        let bv = g.value(b).data();
        let mut o = 0;
        for h in 0..dims[0] {
            for ww in 0..dims[1] {
                for d in 0..dims[2] {
                    let yr = &mut y[o * c_out..(o + 1) * c_out];
                    yr.copy_from_slice(bv);
                    for k in 0..27 {
                        let Some(src) = tap_source(dims, h, ww, d, k) else { continue };
                        let xr = &xv[src * c_in..(src + 1) * c_in];
                        let wt = &wk[k * c_in * c_out..(k + 1) * c_in * c_out];
                        for ci in 0..c_in {
                            axpy(xr[ci], &wt[ci * c_out..(ci + 1) * c_out], yr);
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    let mut ys = xs;
    ys[3] = c_out;
    g.push(
        Tensor::new(ys, y),
        &[x, w, b],
        Box::new(move |inp, _, grad, needs| {
            let xv = inp[0].data();
            let mut gx = needs[0].then(|| vec![0.0; n * c_in]);
            let mut gwk = needs[1].then(|| vec![0.0; 27 * c_in * c_out]);
            let mut o = 0;
            for h in 0..dims[0] {
                for ww in 0..dims[1] {
                    for d in 0..dims[2] {
                        let gr = &grad[o * c_out..(o + 1) * c_out];
                        for k in 0..27 {
                            let Some(src) = tap_source(dims, h, ww, d, k) else { continue };
                            let base = k * c_in * c_out;
                            if let Some(gx) = gx.as_mut() {
                                let gxr = &mut gx[src * c_in..(src + 1) * c_in];
                                for ci in 0..c_in {
                                    gxr[ci] += dot(gr, &wk[base + ci * c_out..base + (ci + 1) * c_out]);
                                }
                            }
                            if let Some(gw) = gwk.as_mut() {
                                let xr = &xv[src * c_in..(src + 1) * c_in];
                                for ci in 0..c_in {
                                    axpy(xr[ci], gr, &mut gw[base + ci * c_out..base + (ci + 1) * c_out]);
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
            let gb = needs[2].then(|| {
                let mut gb = vec![0.0; c_out];
                for r in grad.chunks_exact(c_out) {
                    gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                gb
            });
            vec![gx, gwk.map(|gw| from_tap_major(&gw, c_in, c_out)), gb]
        }),
    )
}

/// Per-axis taps `(i0, i1, frac)` for ×2 linear upsampling with half-pixel
/// centres (`align_corners = false`).
fn upsample_taps(n: usize) -> Vec<(usize, usize, Real)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as Real + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as Real)
        })
        .collect()
}

/// Trilinear ×2 upsampling of a `[H, W, D, C]` map.
pub fn upsample2x(g: &mut Graph, x: Var) -> Var {
    let xs = g.shape(x).to_vec();
    assert_eq!(xs.len(), 4, "upsample2x expects [H, W, D, C]");
    let (dims, c) = ([xs[0], xs[1], xs[2]], xs[3]);
    let taps: Vec<Vec<(usize, usize, Real)>> = dims.iter().map(|&n| upsample_taps(n)).collect();
    let out_dims = dims.map(|n| 2 * n);
    // (source voxel, weight) for the eight corners of each output voxel
    let mut corners: Vec<[(usize, Real); 8]> = Vec::with_capacity(out_dims.iter().product());
    for th in &taps[0] {
        for tw in &taps[1] {
            for td in &taps[2] {
                let mut cs = [(0, 0.0); 8];
                for (k, slot) in cs.iter_mut().enumerate() {
                    let (h, wh) = if k & 4 != 0 { (th.1, th.2) } else { (th.0, 1.0 - th.2) };
                    let (w, ww) = if k & 2 != 0 { (tw.1, tw.2) } else { (tw.0, 1.0 - tw.2) };
                    let (d, wd) = if k & 1 != 0 { (td.1, td.2) } else { (td.0, 1.0 - td.2) };
                    *slot = ((h * dims[1] + w) * dims[2] + d, wh * ww * wd);
                }
                corners.push(cs);
            }
        }
    }
    let xv = g.value(x).data();
    let mut y = vec![0.0; corners.len() * c];
    for (o, cs) in corners.iter().enumerate() {
        let yr = &mut y[o * c..(o + 1) * c];
        for &(src, wt) in cs {
            if wt != 0.0 {
                axpy(wt, &xv[src * c..(src + 1) * c], yr);
            }
        }
    }
    let n_in = xv.len();
    g.push(
        Tensor::new(vec![out_dims[0], out_dims[1], out_dims[2], c], y),
        &[x],
        Box::new(move |_, _, grad, _| {
            let mut gx = vec![0.0; n_in];
            for (o, cs) in corners.iter().enumerate() {
                let gr = &grad[o * c..(o + 1) * c];
                for &(src, wt) in cs {
                    if wt != 0.0 {
                        axpy(wt, gr, &mut gx[src * c..(src + 1) * c]);
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}
