//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a closure that maps the output gradient to input gradients. Calling
//! [`Graph::backward`] walks the tape in reverse once.
//!
//! All arithmetic is carried out in `f64`. Model parameters are stored at
//! 32-bit precision (see `params`), so the tape only widens them.

use std::fmt;

pub type Real = f64;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: Real) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: Real) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: `(input values, output value, output gradient, which
/// inputs need a gradient)` to one optional gradient per input.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[&Tensor], &Tensor, &[Real], &[bool]) -> Vec<Option<Vec<Real>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one call to [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append an operation node. The backward closure is dropped when no
    /// input requires a gradient.
    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = vec![1.0; self.nodes[loss.0].value.len()];
        self.backward_with(loss, seed)
    }

    /// Reverse sweep with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, cotangent: Vec<Real>) -> Gradients {
        assert_eq!(cotangent.len(), self.nodes[output.0].value.len());
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(cotangent);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let (Some(g), true) = (g, self.nodes[v.0].requires_grad) else { continue };
                debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Generic elementwise / structural operations
// ---------------------------------------------------------------------------

/// Sentinel index used by [`Graph::gather`] for zero-filled outputs.
pub const PAD: usize = usize::MAX;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(
            out,
            &[a, b],
            Box::new(|_, _, g, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        )
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "add_const: shape mismatch");
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, &[a], Box::new(|_, _, g, _| vec![Some(g.to_vec())]))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        self.push(out, &[a], Box::new(move |_, _, g, _| vec![Some(g.iter().map(|x| x * s).collect())]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: Real = self.value(a).data().iter().sum();
        let n = self.value(a).len();
        self.push(Tensor::scalar(total), &[a], Box::new(move |_, _, g, _| vec![Some(vec![g[0]; n])]))
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, Real)]) -> Var {
        let total: Real = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<Real> = terms.iter().map(|t| t.1).collect();
        self.push(
            Tensor::scalar(total),
            &vars,
            Box::new(move |_, _, g, needs| {
                weights.iter().zip(needs).map(|(w, &n)| n.then(|| vec![w * g[0]])).collect()
            }),
        )
    }

    /// `out[i] = x[index[i]]`, or 0 where `index[i] == PAD`. The backward pass
    /// scatter-adds, so repeated indices are allowed.
    pub fn gather(&mut self, x: Var, out_shape: Vec<usize>, index: Vec<usize>) -> Var {
        assert_eq!(out_shape.iter().product::<usize>(), index.len(), "gather: index length");
        let src = self.value(x).data();
        let n_in = src.len();
        let data = index.iter().map(|&i| if i == PAD { 0.0 } else { src[i] }).collect();
        let out = Tensor::new(out_shape, data);
        self.push(
            out,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![0.0; n_in];
                for (&i, &gi) in index.iter().zip(g) {
                    if i != PAD {
                        gx[i] += gi;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, &[x], Box::new(|_, _, g, _| vec![Some(g.to_vec())]))
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_last: leading shape mismatch");
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        {
            let (xa, xb) = (self.value(a).data(), self.value(b).data());
            for r in 0..rows {
                data.extend_from_slice(&xa[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&xb[r * cb..(r + 1) * cb]);
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(
            Tensor::new(shape, data),
            &[a, b],
            Box::new(move |_, _, g, needs| {
                let split = |off: usize, c: usize| {
                    let mut out = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        let base = r * (ca + cb) + off;
                        out.extend_from_slice(&g[base..base + c]);
                    }
                    out
                };
                vec![needs[0].then(|| split(0, ca)), needs[1].then(|| split(ca, cb))]
            }),
        )
    }

    /// `y = x·Wᵀ + b` over the trailing axis; `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
        let (n_out, n_in) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), n_in, "linear: input width {xs:?} vs weight {ws:?}");
        assert_eq!(self.shape(b), [n_out], "linear: bias shape");
        let rows = self.value(x).len() / n_in;
        let mut y = vec![0.0; rows * n_out];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for r in 0..rows {
                let xr = &xv[r * n_in..(r + 1) * n_in];
                let yr = &mut y[r * n_out..(r + 1) * n_out];
                for (o, yo) in yr.iter_mut().enumerate() {
                    *yo = bv[o] + dot(xr, &wv[o * n_in..(o + 1) * n_in]);
                }
            }
        }
        let mut ys = xs;
        *ys.last_mut().unwrap() = n_out;
        self.push(
            Tensor::new(ys, y),
            &[x, w, b],
            Box::new(move |inp, _, g, needs| {
                let (xv, wv) = (inp[0].data(), inp[1].data());
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * n_in];
                    for r in 0..rows {
                        let gxr = &mut gx[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            axpy(g[r * n_out + o], &wv[o * n_in..(o + 1) * n_in], gxr);
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; n_out * n_in];
                    for r in 0..rows {
                        let xr = &xv[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            axpy(g[r * n_out + o], xr, &mut gw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; n_out];
                    for r in 0..rows {
                        gb.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let rows = self.value(x).len() / c;
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * c];
        {
            let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
            for r in 0..rows {
                let xr = &xv[r * c..(r + 1) * c];
                let mean = xr.iter().sum::<Real>() / c as Real;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (xr[j] - mean) * is;
                    xhat[r * c + j] = h;
                    y[r * c + j] = gv[j] * h + bv[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, y),
            &[x, gamma, beta],
            Box::new(move |inp, _, g, needs| {
                let gv = inp[1].data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..c {
                            let gh = g[r * c + j] * gv[j];
                            m1 += gh;
                            m2 += gh * xhat[r * c + j];
                        }
                        m1 /= c as Real;
                        m2 /= c as Real;
                        for j in 0..c {
                            let gh = g[r * c + j] * gv[j];
                            gx[r * c + j] = inv_std[r] * (gh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    gx
                });
                let ggamma = needs[1].then(|| {
                    let mut out = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            out[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    out
                });
                let gbeta = needs[2].then(|| {
                    let mut out = vec![0.0; c];
                    for r in 0..rows {
                        out.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, b)| *a += b);
                    }
                    out
                });
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        const A: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const B: Real = 0.044_715;
        let xv = self.value(x);
        let y = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (A * (v + B * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), y);
        self.push(
            out,
            &[x],
            Box::new(|inp, _, g, _| {
                let gx = inp[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let t = (A * (v + B * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * A * (1.0 + 3.0 * B * v * v);
                        gi * d
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Var {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let out = Tensor::new(xv.shape().to_vec(), y);
        self.push(
            out,
            &[x],
            Box::new(move |inp, _, g, _| {
                let gx = inp[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { slope * gi })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha·x`
#[inline]
pub(crate) fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central-difference check of `f` w.r.t. every entry of every input.
    /// `f` rebuilds the graph from the given inputs and returns a scalar node.
    pub fn check_gradients<F>(inputs: &[Tensor], step: Real, f: F) -> Real
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut worst: Real = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for i in 0..t.len() {
                let eval = |delta: Real| {
                    let mut perturbed = inputs.to_vec();
                    perturbed[k].data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|t| g.constant(t)).collect();
                    let out = f(&mut g, &vars);
                    g.value(out).item()
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                let scale = analytic[i].abs().max(numeric.abs());
                if scale > 1e-8 {
                    worst = worst.max((analytic[i] - numeric).abs() / scale);
                }
            }
        }
        worst
    }

    /// Deterministic pseudo-random tensor in [-1, 1].
    pub fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Fixed random projection so vector-valued ops reduce to a scalar.
    pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let w = rand_tensor(g.shape(v).to_vec(), seed);
        let n = w.len();
        let wv = g.constant(w.clone().reshaped(vec![1, n]));
        let flat = g.reshape(v, vec![1, n]);
        let zero = g.constant(Tensor::zeros(vec![1]));
        let y = g.linear(flat, wv, zero);
        g.reshape(y, vec![])
    }
}
