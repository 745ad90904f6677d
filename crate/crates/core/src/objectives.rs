//! Registration objectives: windowed squared NCC, bending energy, soft Dice,
//! their weighted composite, and hard Dice for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp_var, DeformationField};
use crate::graph::{Graph, Real, Tensor, Var};
use crate::volume::{voxel_count, LabelMap, Shape3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ncc: f64,
    pub lambda_bend: f64,
    pub lambda_dice: f64,
    pub ncc_window: usize,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ncc: 1.0, lambda_bend: 0.01, lambda_dice: 1.0, ncc_window: 9, epsilon: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ncc", self.lambda_ncc),
            ("lambda_bend", self.lambda_bend),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), format!("must be >= 0, got {v}")));
            }
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::config("loss.ncc_window", format!("must be odd and >= 3, got {}", self.ncc_window)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be > 0"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Local NCC
// ---------------------------------------------------------------------------

/// Sum over the `(2r+1)³` window clipped to the grid. The clipped window is
/// symmetric, so this operator is its own adjoint.
fn box_sum(data: &[Real], shape: Shape3, r: usize) -> Vec<Real> {
    let mut cur = data.to_vec();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let mut next = vec![0.0; cur.len()];
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                prefix.clear();
                prefix.push(0.0);
                let mut acc = 0.0;
                for t in 0..len {
                    acc += cur[base + t * stride];
                    prefix.push(acc);
                }
                for t in 0..len {
                    let lo = t.saturating_sub(r);
                    let hi = (t + r + 1).min(len);
                    next[base + t * stride] = prefix[hi] - prefix[lo];
                }
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(shape: Shape3, r: usize) -> Vec<Real> {
    let axis_len = |t: usize, n: usize| ((t + r + 1).min(n) - t.saturating_sub(r)) as Real;
    let mut out = Vec::with_capacity(voxel_count(shape));
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                out.push(axis_len(h, shape[0]) * axis_len(w, shape[1]) * axis_len(d, shape[2]));
            }
        }
    }
    out
}

struct NccStats {
    cc: Vec<Real>,
    /// dcc/d(cross), dcc/d(var_f), dcc/d(var_m)
    dcross: Vec<Real>,
    dvf: Vec<Real>,
    dvm: Vec<Real>,
    sf: Vec<Real>,
    sm: Vec<Real>,
    n: Vec<Real>,
}

fn ncc_stats(f: &[Real], m: &[Real], shape: Shape3, window: usize, eps: Real) -> NccStats {
    let r = window / 2;
    let ff: Vec<Real> = f.iter().map(|v| v * v).collect();
    let mm: Vec<Real> = m.iter().map(|v| v * v).collect();
    let fm: Vec<Real> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let sf = box_sum(f, shape, r);
    let sm = box_sum(m, shape, r);
    let sff = box_sum(&ff, shape, r);
    let smm = box_sum(&mm, shape, r);
    let sfm = box_sum(&fm, shape, r);
    let n = window_counts(shape, r);
    let len = f.len();
    let (mut cc, mut dcross, mut dvf, mut dvm) =
        (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for i in 0..len {
        let cross = sfm[i] - sf[i] * sm[i] / n[i];
        let vf = (sff[i] - sf[i] * sf[i] / n[i]).max(0.0);
        let vm = (smm[i] - sm[i] * sm[i] / n[i]).max(0.0);
        let den = vf * vm + eps;
        cc[i] = cross * cross / den;
        dcross[i] = 2.0 * cross / den;
        dvf[i] = -cross * cross * vm / (den * den);
        dvm[i] = -cross * cross * vf / (den * den);
    }
    NccStats { cc, dcross, dvf, dvm, sf, sm, n }
}

/// Differentiable `−mean(cc)` between two single-channel grids of `shape`.
pub fn lncc_var(g: &mut Graph, fixed: Var, warped: Var, shape: Shape3, window: usize, eps: Real) -> Result<Var> {
    let n = voxel_count(shape);
    if g.value(fixed).len() != n || g.value(warped).len() != n {
        return Err(Error::shape(format!("lncc: inputs do not match grid {shape:?}")));
    }
    if window < 1 || window % 2 == 0 {
        return Err(Error::invalid(format!("lncc window must be odd, got {window}")));
    }
    let st = ncc_stats(g.value(fixed).data(), g.value(warped).data(), shape, window, eps);
    let loss = -st.cc.iter().sum::<Real>() / n as Real;
    Ok(g.push(
        Tensor::scalar(loss),
        &[fixed, warped],
        Box::new(move |inp, _, grad, needs| {
            let scale = -grad[0] / n as Real;
            let (f, m) = (inp[0].data(), inp[1].data());
            let r = window / 2;
            let c: Vec<Real> = st.dcross.iter().map(|v| v * scale).collect();
            let bc = box_sum(&c, shape, r);
            // `own` is the image whose gradient we want, `other` its partner
            let side = |own: &[Real], other: &[Real], s_own: &[Real], s_other: &[Real], dvar: &[Real]| {
                let a: Vec<Real> = (0..n)
                    .map(|i| scale * (st.dcross[i] * (-s_other[i] / st.n[i]) + dvar[i] * (-2.0 * s_own[i] / st.n[i])))
                    .collect();
                let b: Vec<Real> = dvar.iter().map(|v| v * scale).collect();
                let (ba, bb) = (box_sum(&a, shape, r), box_sum(&b, shape, r));
                (0..n).map(|i| ba[i] + 2.0 * own[i] * bb[i] + other[i] * bc[i]).collect::<Vec<_>>()
            };
            vec![
                needs[0].then(|| side(f, m, &st.sf, &st.sm, &st.dvf)),
                needs[1].then(|| side(m, f, &st.sm, &st.sf, &st.dvm)),
            ]
        }),
    ))
}

/// Windowed squared normalized cross-correlation loss, in [−1, 0].
pub fn lncc(fixed: &Volume, warped: &Volume, window: usize, eps: f64) -> Result<f64> {
    if fixed.shape() != warped.shape() {
        return Err(Error::shape(format!("lncc: {:?} vs {:?}", fixed.shape(), warped.shape())));
    }
    let st = ncc_stats(&fixed.to_real(), &warped.to_real(), fixed.shape(), window, eps);
    if window % 2 == 0 {
        return Err(Error::invalid(format!("lncc window must be odd, got {window}")));
    }
    Ok(-st.cc.iter().sum::<f64>() / st.cc.len() as f64)
}

// ---------------------------------------------------------------------------
// Bending energy
// ---------------------------------------------------------------------------

/// Second-derivative stencils: (weight in the energy, taps as (dh, dw, dd, coeff)).
fn bending_stencils() -> Vec<(Real, Vec<([isize; 3], Real)>)> {
    let pure = |a: usize| {
        let mut e = [0isize; 3];
        e[a] = 1;
        let neg = e.map(|v| -v);
        (1.0, vec![(e, 1.0), ([0; 3], -2.0), (neg, 1.0)])
    };
    let mixed = |a: usize, b: usize| {
        let off = |sa: isize, sb: isize| {
            let mut o = [0isize; 3];
            o[a] = sa;
            o[b] = sb;
            o
        };
        (2.0, vec![(off(1, 1), 0.25), (off(1, -1), -0.25), (off(-1, 1), -0.25), (off(-1, -1), 0.25)])
    };
    vec![pure(0), pure(1), pure(2), mixed(0, 1), mixed(1, 2), mixed(2, 0)]
}

fn check_bending_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&n| n < 5) {
        return Err(Error::shape(format!("bending energy needs >= 5 voxels per axis, got {shape:?}")));
    }
    Ok(())
}

fn interior(shape: Shape3) -> impl Iterator<Item = [usize; 3]> {
    (1..shape[0] - 1).flat_map(move |h| {
        (1..shape[1] - 1).flat_map(move |w| (1..shape[2] - 1).map(move |d| [h, w, d]))
    })
}

fn tap_index(shape: Shape3, x: [usize; 3], o: [isize; 3]) -> usize {
    let p = [0, 1, 2].map(|a| (x[a] as isize + o[a]) as usize);
    (p[0] * shape[1] + p[1]) * shape[2] + p[2]
}

/// `u_hh² + u_ww² + u_dd² + 2(u_hw² + u_wd² + u_dh²)` summed over the three
/// components, at every interior voxel (raster order).
pub fn bending_density(f: &DeformationField) -> Result<Vec<f64>> {
    let shape = f.shape();
    check_bending_shape(shape)?;
    let u = f.to_real();
    let stencils = bending_stencils();
    Ok(interior(shape)
        .map(|x| {
            let mut e = 0.0;
            for c in 0..3 {
                for (wt, taps) in &stencils {
                    let s: Real = taps.iter().map(|&(o, k)| k * u[tap_index(shape, x, o) * 3 + c]).sum();
                    e += wt * s * s;
                }
            }
            e
        })
        .collect())
}

/// Differentiable bending energy of a `[H, W, D, 3]` displacement: mean over
/// interior voxels and components.
pub fn bending_energy_var(g: &mut Graph, disp: Var) -> Result<Var> {
    let s = g.shape(disp).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape(format!("bending energy expects [H, W, D, 3], got {s:?}")));
    }
    let shape = [s[0], s[1], s[2]];
    check_bending_shape(shape)?;
    let stencils = bending_stencils();
    let count = ((shape[0] - 2) * (shape[1] - 2) * (shape[2] - 2) * 3) as Real;
    let u = g.value(disp).data();
    let mut total = 0.0;
    for x in interior(shape) {
        for c in 0..3 {
            for (wt, taps) in &stencils {
                let v: Real = taps.iter().map(|&(o, k)| k * u[tap_index(shape, x, o) * 3 + c]).sum();
                total += wt * v * v;
            }
        }
    }
    Ok(g.push(
        Tensor::scalar(total / count),
        &[disp],
        Box::new(move |inp, _, grad, _| {
            let u = inp[0].data();
            let mut gu = vec![0.0; u.len()];
            let scale = 2.0 * grad[0] / count;
            for x in interior(shape) {
                for c in 0..3 {
                    for (wt, taps) in &stencils {
                        let v: Real = taps.iter().map(|&(o, k)| k * u[tap_index(shape, x, o) * 3 + c]).sum();
                        let coef = scale * wt * v;
                        for &(o, k) in taps {
                            gu[tap_index(shape, x, o) * 3 + c] += coef * k;
                        }
                    }
                }
            }
            vec![Some(gu)]
        }),
    ))
}

pub fn bending_energy(f: &DeformationField) -> Result<f64> {
    let mut g = Graph::new();
    let s = f.shape();
    let u = g.constant(Tensor::new(vec![s[0], s[1], s[2], 3], f.to_real()));
    let e = bending_energy_var(&mut g, u)?;
    Ok(g.value(e).item())
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// Differentiable `1 − mean_l softDice_l` between predicted channels
/// `[voxels, L]` and a constant target of the same layout. Labels absent from
/// both count as perfect overlap.
pub fn soft_dice_loss_var(g: &mut Graph, pred: Var, target: Vec<Real>, n_labels: usize, eps: Real) -> Result<Var> {
    if g.value(pred).len() != target.len() || g.value(pred).last_dim() != n_labels {
        return Err(Error::shape("soft dice: prediction and target layouts differ"));
    }
    let p = g.value(pred).data();
    let voxels = target.len() / n_labels;
    let (mut inter, mut sp, mut sq) = (vec![0.0; n_labels], vec![0.0; n_labels], vec![0.0; n_labels]);
    for i in 0..voxels {
        for l in 0..n_labels {
            let (a, b) = (p[i * n_labels + l], target[i * n_labels + l]);
            inter[l] += a * b;
            sp[l] += a;
            sq[l] += b;
        }
    }
    let mut dice_sum = 0.0;
    let mut live = vec![false; n_labels];
    for l in 0..n_labels {
        if sp[l] + sq[l] == 0.0 {
            dice_sum += 1.0;
        } else {
            live[l] = true;
            dice_sum += 2.0 * inter[l] / (sp[l] + sq[l] + eps);
        }
    }
    let loss = 1.0 - dice_sum / n_labels as Real;
    Ok(g.push(
        Tensor::scalar(loss),
        &[pred],
        Box::new(move |_, _, grad, _| {
            let mut gp = vec![0.0; target.len()];
            let scale = -grad[0] / n_labels as Real;
            for l in 0..n_labels {
                if !live[l] {
                    continue;
                }
                let den = sp[l] + sq[l] + eps;
                let (c1, c2) = (2.0 / den, 2.0 * inter[l] / (den * den));
                for i in 0..voxels {
                    gp[i * n_labels + l] = scale * (c1 * target[i * n_labels + l] - c2);
                }
            }
            vec![Some(gp)]
        }),
    ))
}

fn check_seg_shapes(a: &LabelMap, b: &LabelMap, f: &DeformationField) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != f.shape() {
        return Err(Error::shape(format!(
            "segmentations {:?}/{:?} vs field {:?}",
            a.shape(),
            b.shape(),
            f.shape()
        )));
    }
    Ok(())
}

/// Soft Dice loss after trilinearly warping the moving one-hot channels.
pub fn dice_loss(fixed_seg: &LabelMap, moving_seg: &LabelMap, f: &DeformationField, n_labels: usize, eps: f64) -> Result<f64> {
    check_seg_shapes(fixed_seg, moving_seg, f)?;
    let mut g = Graph::new();
    let u = disp_constant(&mut g, f);
    let d = dice_term(&mut g, fixed_seg, moving_seg, u, n_labels, eps)?;
    Ok(g.value(d).item())
}

fn dice_term(g: &mut Graph, fixed_seg: &LabelMap, moving_seg: &LabelMap, u: Var, n_labels: usize, eps: f64) -> Result<Var> {
    let s = fixed_seg.shape();
    let moving = g.constant(Tensor::new(vec![s[0], s[1], s[2], n_labels], moving_seg.one_hot(n_labels)));
    let warped = warp_var(g, moving, u)?;
    soft_dice_loss_var(g, warped, fixed_seg.one_hot(n_labels), n_labels, eps)
}

fn disp_constant(g: &mut Graph, f: &DeformationField) -> Var {
    let s = f.shape();
    g.constant(Tensor::new(vec![s[0], s[1], s[2], 3], f.to_real()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: Vec<f64>,
    pub mean: f64,
}

/// Hard Dice `2|A∩B| / (|A|+|B|)` per foreground label; empty-vs-empty is 1.
pub fn dice_eval(a: &LabelMap, b: &LabelMap, n_labels: usize) -> Result<DiceScores> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("dice_eval: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut inter = vec![0usize; n_labels + 1];
    let mut size_a = vec![0usize; n_labels + 1];
    let mut size_b = vec![0usize; n_labels + 1];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as usize, y as usize);
        if x <= n_labels {
            size_a[x] += 1;
        }
        if y <= n_labels {
            size_b[y] += 1;
        }
        if x == y && x <= n_labels {
            inter[x] += 1;
        }
    }
    let per_label: Vec<f64> = (1..=n_labels)
        .map(|l| {
            let denom = size_a[l] + size_b[l];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[l] as f64 / denom as f64
            }
        })
        .collect();
    let mean = if per_label.is_empty() { 1.0 } else { per_label.iter().sum::<f64>() / per_label.len() as f64 };
    Ok(DiceScores { per_label, mean })
}

// ---------------------------------------------------------------------------
// Composite objective
// ---------------------------------------------------------------------------

/// Unweighted component values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ncc: f64,
    pub bend: f64,
    pub dice: Option<f64>,
}

pub struct LossVars {
    pub total: Var,
    pub ncc: Var,
    pub bend: Var,
    pub dice: Option<Var>,
}

impl LossVars {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            ncc: g.value(self.ncc).item(),
            bend: g.value(self.bend).item(),
            dice: self.dice.map(|d| g.value(d).item()),
        }
    }
}

/// Segmentations for the Dice term: (fixed, moving, label count).
pub type SegPair<'a> = (&'a LabelMap, &'a LabelMap, usize);

/// `λ_ncc·LNCC(I_F, Warp(I_M)) + λ_bend·Bending(u) [+ λ_dice·DiceLoss(S_F, Warp(S_M))]`
/// with `u` a `[H, W, D, 3]` node.
pub fn total_loss_var(
    g: &mut Graph,
    fixed: &Volume,
    moving: &Volume,
    u: Var,
    segs: Option<SegPair<'_>>,
    w: &LossWeights,
) -> Result<LossVars> {
    let shape = fixed.shape();
    if moving.shape() != shape || g.shape(u)[..3] != shape {
        return Err(Error::shape(format!(
            "total loss: fixed {shape:?}, moving {:?}, field {:?}",
            moving.shape(),
            g.shape(u)
        )));
    }
    let dims4 = vec![shape[0], shape[1], shape[2], 1];
    let fv = g.constant(Tensor::new(dims4.clone(), fixed.to_real()));
    let mv = g.constant(Tensor::new(dims4, moving.to_real()));
    let warped = warp_var(g, mv, u)?;
    let ncc = lncc_var(g, fv, warped, shape, w.ncc_window, w.epsilon)?;
    let bend = bending_energy_var(g, u)?;
    let mut terms = vec![(ncc, w.lambda_ncc), (bend, w.lambda_bend)];
    let dice = match segs {
        Some((sf, sm, n)) => {
            if sf.shape() != shape || sm.shape() != shape {
                return Err(Error::shape("segmentation shape differs from image shape"));
            }
            let d = dice_term(g, sf, sm, u, n, w.epsilon)?;
            terms.push((d, w.lambda_dice));
            Some(d)
        }
        None => None,
    };
    let total = g.weighted_sum(&terms);
    Ok(LossVars { total, ncc, bend, dice })
}

pub fn total_loss(
    fixed: &Volume,
    moving: &Volume,
    f: &DeformationField,
    segs: Option<SegPair<'_>>,
    w: &LossWeights,
) -> Result<(f64, LossComponents)> {
    let mut g = Graph::new();
    let u = disp_constant(&mut g, f);
    let vars = total_loss_var(&mut g, fixed, moving, u, segs, w)?;
    Ok((g.value(vars.total).item(), vars.components(&g)))
}
