//! Patch embedding of a fixed/moving pair, sinusoidal positional encoding
//! and Hi-Res token merging.
//!
//! The pair is stacked as a 2-channel volume and cut into non-overlapping
//! `s×s×s` patches; each patch is mapped to `C` channels by a strided
//! convolution (equivalently, a linear map of the flattened patch). With a
//! small stride, adjacent `d×d×d` token blocks are then concatenated along
//! the channel axis and projected back down, trading lattice resolution for
//! channel width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Real, Tensor, Var, PAD};
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamStore};
use crate::volume::{Shape3, Volume};

/// Tokens on a 3-D lattice, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub dims: Shape3,
    pub c_tok: usize,
    pub data: Vec<Real>,
    pub requires_grad: bool,
}

impl TokenGrid {
    pub fn new(dims: Shape3, c_tok: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() * c_tok {
            return Err(Error::shape(format!("token grid {dims:?}x{c_tok} vs {} values", data.len())));
        }
        Ok(Self { dims, c_tok, data, requires_grad: false })
    }

    pub fn n_tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn token(&self, h: usize, w: usize, d: usize) -> &[Real] {
        let i = (h * self.dims[1] + w) * self.dims[2] + d;
        &self.data[i * self.c_tok..(i + 1) * self.c_tok]
    }

    pub(crate) fn to_var(&self, g: &mut Graph) -> Var {
        let t = Tensor::new(vec![self.dims[0], self.dims[1], self.dims[2], self.c_tok], self.data.clone());
        if self.requires_grad {
            g.input(t)
        } else {
            g.constant(t)
        }
    }

    pub(crate) fn from_var(g: &Graph, v: Var) -> Self {
        let s = g.shape(v);
        Self {
            dims: [s[0], s[1], s[2]],
            c_tok: s[3],
            data: g.value(v).data().to_vec(),
            requires_grad: g.requires_grad(v),
        }
    }
}

/// Zero padding that brings `shape` up to a multiple of `multiple`, split
/// as evenly as possible with any odd voxel on the low side.
pub fn padding_for(shape: Shape3, multiple: usize) -> ([usize; 3], Shape3) {
    let mut lo = [0; 3];
    let mut padded = [0; 3];
    for a in 0..3 {
        let target = shape[a].div_ceil(multiple) * multiple;
        let total = target - shape[a];
        lo[a] = total - total / 2;
        padded[a] = target;
    }
    (lo, padded)
}

/// Strided patch embedding: conv weight `[C, 2, s, s, s]` plus bias `[C]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Linear,
    pub stride: usize,
    pub embed_dim: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, stride: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let conv = Linear::with_weight_shape(
            store,
            &format!("{name}.conv"),
            vec![embed_dim, 2, stride, stride, stride],
            Init::TruncNormal(0.02),
            rng,
        );
        Self { conv, stride, embed_dim }
    }

    pub fn param_count(stride: usize, embed_dim: usize) -> usize {
        2 * embed_dim * stride.pow(3) + embed_dim
    }

    /// `pair` is the stacked `[H, W, D, 2]` input; it is conceptually padded
    /// to `padded` (offset `pad_lo`) before patching. `padded` must be a
    /// multiple of the stride on every axis.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pair: Var, pad_lo: [usize; 3], padded: Shape3) -> Result<Var> {
        let s = self.stride;
        let ps = g.shape(pair).to_vec();
        if ps.len() != 4 || ps[3] != 2 {
            return Err(Error::shape(format!("patch embed expects [H, W, D, 2], got {ps:?}")));
        }
        if padded.iter().any(|n| n % s != 0) {
            return Err(Error::shape(format!("padded shape {padded:?} not divisible by stride {s}")));
        }
        let shape = [ps[0], ps[1], ps[2]];
        let lattice = padded.map(|n| n / s);
        let feat = 2 * s * s * s;
        let mut index = Vec::with_capacity(lattice.iter().product::<usize>() * feat);
        for th in 0..lattice[0] {
            for tw in 0..lattice[1] {
                for td in 0..lattice[2] {
                    for ci in 0..2 {
                        for a in 0..s {
                            for b in 0..s {
                                for c in 0..s {
                                    let pos = [th * s + a, tw * s + b, td * s + c];
                                    let inside = (0..3).all(|k| pos[k] >= pad_lo[k] && pos[k] - pad_lo[k] < shape[k]);
                                    index.push(if inside {
                                        let (h, w, d) = (pos[0] - pad_lo[0], pos[1] - pad_lo[1], pos[2] - pad_lo[2]);
                                        ((h * shape[1] + w) * shape[2] + d) * 2 + ci
                                    } else {
                                        PAD
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        let patches = g.gather(pair, vec![lattice[0], lattice[1], lattice[2], feat], index);
        Ok(self.conv.forward(g, p, patches))
    }
}

/// Channel-last `[H, W, D, 2]` stack of a fixed/moving pair.
pub fn stack_pair(fixed: &Volume, moving: &Volume) -> Result<Tensor> {
    if fixed.shape() != moving.shape() {
        return Err(Error::shape(format!("fixed {:?} vs moving {:?}", fixed.shape(), moving.shape())));
    }
    if fixed.spacing() != moving.spacing() {
        return Err(Error::shape(format!("fixed spacing {:?} vs moving {:?}", fixed.spacing(), moving.spacing())));
    }
    let s = fixed.shape();
    let mut data = Vec::with_capacity(fixed.data().len() * 2);
    for (&f, &m) in fixed.data().iter().zip(moving.data()) {
        data.push(f as Real);
        data.push(m as Real);
    }
    Ok(Tensor::new(vec![s[0], s[1], s[2], 2], data))
}

/// Factorized 3-D sinusoidal encoding. Channels split into three groups of
/// `2·⌊c/6⌋`; group `a` encodes lattice axis `a` as interleaved
/// `sin(p·ω_i), cos(p·ω_i)` with `ω_i = 10000^(−2i/g)`. Leftover channels
/// (when `c` is not a multiple of 6) are left unencoded.
pub fn positional_table(dims: Shape3, c: usize) -> Tensor {
    let group = 2 * (c / 6);
    let mut data = vec![0.0; dims.iter().product::<usize>() * c];
    let mut t = 0;
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for d in 0..dims[2] {
                let pos = [h, w, d];
                let row = &mut data[t * c..(t + 1) * c];
                for a in 0..3 {
                    for i in 0..group / 2 {
                        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / group as f64);
                        let arg = pos[a] as f64 * omega;
                        row[a * group + 2 * i] = arg.sin();
                        row[a * group + 2 * i + 1] = arg.cos();
                    }
                }
                t += 1;
            }
        }
    }
    Tensor::new(vec![dims[0], dims[1], dims[2], c], data)
}

pub fn positional_encode_var(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let table = positional_table([s[0], s[1], s[2]], s[3]);
    g.add_const(x, &table)
}

/// Hi-Res merge: concatenate each `d×d×d` token block (block offset major,
/// channel minor) and project `C·d³ → c_out`.
#[derive(Clone, Debug)]
pub struct HiResMerge {
    pub d: usize,
    pub proj: Linear,
}

impl HiResMerge {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, d: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), c_in * d * d * d, c_out, Init::TruncNormal(0.02), rng);
        Self { d, proj }
    }

    pub fn param_count(c_in: usize, d: usize, c_out: usize) -> usize {
        Linear::param_count(c_in * d.pow(3), c_out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let merged = block_concat(g, x, self.d)?;
        Ok(self.proj.forward(g, p, merged))
    }
}

/// `[H, W, D, C] → [H/k, W/k, D/k, k³·C]`, concatenating each `k×k×k` block
/// in lexicographic (δh, δw, δd) order.
pub fn block_concat(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (dims, c) = ([s[0], s[1], s[2]], s[3]);
    if k == 0 || dims.iter().any(|n| n % k != 0) {
        return Err(Error::shape(format!("lattice {dims:?} not divisible by {k}")));
    }
    let out = dims.map(|n| n / k);
    let feat = k * k * k * c;
    let mut index = Vec::with_capacity(out.iter().product::<usize>() * feat);
    for h in 0..out[0] {
        for w in 0..out[1] {
            for d in 0..out[2] {
                for a in 0..k {
                    for b in 0..k {
                        for e in 0..k {
                            let src = ((h * k + a) * dims[1] + w * k + b) * dims[2] + d * k + e;
                            index.extend((0..c).map(|ch| src * c + ch));
                        }
                    }
                }
            }
        }
    }
    Ok(g.gather(x, vec![out[0], out[1], out[2], feat], index))
}

/// Standalone tokenizer parameters: a patch embedding and optional Hi-Res
/// projection.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub merge: Option<HiResMerge>,
}

impl EmbedParams {
    pub fn new(stride: usize, embed_dim: usize, merge: Option<(usize, usize)>, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, "embed", stride, embed_dim, rng);
        let merge = merge.map(|(d, c_out)| HiResMerge::new(&mut store, "hires", embed_dim, d, c_out, rng));
        Self { store, embed, merge }
    }
}

pub fn patch_embed(fixed: &Volume, moving: &Volume, params: &EmbedParams) -> Result<TokenGrid> {
    let pair = stack_pair(fixed, moving)?;
    let (lo, padded) = padding_for(fixed.shape(), params.embed.stride);
    let mut g = Graph::new();
    let p = params.store.bind_frozen(&mut g);
    let x = g.constant(pair);
    let y = params.embed.forward(&mut g, &p, x, lo, padded)?;
    Ok(TokenGrid::from_var(&g, y))
}

pub fn positional_encode(grid: &TokenGrid) -> TokenGrid {
    let table = positional_table(grid.dims, grid.c_tok);
    let data = grid.data.iter().zip(table.data()).map(|(a, b)| a + b).collect();
    TokenGrid { data, ..grid.clone() }
}

pub fn hires_merge(grid: &TokenGrid, params: &EmbedParams) -> Result<TokenGrid> {
    let merge = params.merge.as_ref().ok_or_else(|| Error::invalid("embed params carry no merge projection"))?;
    let mut g = Graph::new();
    let p = params.store.bind_frozen(&mut g);
    let x = grid.to_var(&mut g);
    let y = merge.forward(&mut g, &p, x)?;
    Ok(TokenGrid::from_var(&g, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::{check_gradients, project, rand_tensor};
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn embed_shape_arithmetic() {
        let v = Volume::zeros([32, 32, 32]);
        let p = EmbedParams::new(2, 96, None, &mut rng());
        let t = patch_embed(&v, &v, &p).unwrap();
        assert_eq!((t.dims, t.c_tok), ([16, 16, 16], 96));
        assert!(t.data.iter().all(|&x| x == 0.0));
        assert_eq!(p.store.count(), PatchEmbed::param_count(2, 96));

        let (_, padded) = padding_for([160, 192, 224], 4);
        assert_eq!(padded.map(|n| n / 4), [40, 48, 56]);
        assert_eq!(40 * 48 * 56, 107_520);
    }

    #[test]
    fn padding_is_lossless_and_low_biased() {
        assert_eq!(padding_for([5, 8, 7], 4), ([2, 0, 1], [8, 8, 8]));
        let v = Volume::from_fn([5, 4, 4], |h, w, d| (h + w + d) as f32);
        let p = EmbedParams::new(4, 6, None, &mut rng());
        let t = patch_embed(&v, &v, &p).unwrap();
        assert_eq!(t.dims, [2, 1, 1]);
    }

    #[test]
    fn each_token_depends_on_one_patch() {
        let shape = [8, 8, 8];
        let base = Volume::from_fn(shape, |h, w, d| ((h * 13 + w * 7 + d * 3) % 10) as f32 / 10.0);
        let p = EmbedParams::new(2, 6, Some((2, 12)), &mut rng());
        let t0 = patch_embed(&base, &base, &p).unwrap();
        let mut bumped = base.clone().into_data();
        bumped[(3 * 8 + 4) * 8 + 5] += 1.0;
        let bumped = Volume::new(shape, [1.0; 3], bumped).unwrap();
        let t1 = patch_embed(&base, &bumped, &p).unwrap();
        let changed: Vec<usize> = (0..t0.n_tokens())
            .filter(|&i| t0.data[i * 6..(i + 1) * 6] != t1.data[i * 6..(i + 1) * 6])
            .collect();
        assert_eq!(changed, vec![(1 * 4 + 2) * 4 + 2]);

        let m0 = hires_merge(&positional_encode(&t0), &p).unwrap();
        let m1 = hires_merge(&positional_encode(&t1), &p).unwrap();
        let changed = (0..m0.n_tokens()).filter(|&i| m0.data[i * 12..(i + 1) * 12] != m1.data[i * 12..(i + 1) * 12]).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn positional_encoding_values() {
        let g = TokenGrid::new([2, 2, 3], 12, vec![0.0; 144]).unwrap();
        let e = positional_encode(&g);
        assert_eq!(e.token(0, 0, 0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // tokens differing only in d differ only in the third group
        let (a, b) = (e.token(1, 0, 0), e.token(1, 0, 2));
        assert_eq!(a[..8], b[..8]);
        assert!(a[8..] != b[8..]);
        // scalar recomputation
        let (h, w, d) = (1usize, 1usize, 2usize);
        let tok = e.token(h, w, d);
        for (axis, pos) in [h, w, d].into_iter().enumerate() {
            for i in 0..2 {
                let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / 4.0);
                assert_eq!(tok[axis * 4 + 2 * i], (pos as f64 * omega).sin());
                assert_eq!(tok[axis * 4 + 2 * i + 1], (pos as f64 * omega).cos());
            }
        }
    }

    #[test]
    fn positional_encoding_pads_odd_widths() {
        let g = TokenGrid::new([1, 1, 2], 16, vec![0.0; 32]).unwrap();
        let e = positional_encode(&g);
        // 3 groups of 4 channels; 4 trailing channels untouched
        assert!(e.token(0, 0, 1)[12..].iter().all(|&v| v == 0.0));
        assert_eq!(e.token(0, 0, 1)[8], 1f64.sin());
    }

    #[test]
    fn hires_merge_channel_counts() {
        let p = EmbedParams::new(2, 96, Some((2, 192)), &mut rng());
        let merge = p.merge.as_ref().unwrap();
        assert_eq!(merge.proj.n_in, 768);
        assert_eq!(merge.proj.n_out, 192);
        let g = TokenGrid::new([16, 16, 16], 96, vec![0.0; 4096 * 96]).unwrap();
        let out = hires_merge(&g, &p).unwrap();
        assert_eq!((out.dims, out.c_tok), ([8, 8, 8], 192));
        assert_eq!(p.store.count(), PatchEmbed::param_count(2, 96) + HiResMerge::param_count(96, 2, 192));
        assert!(hires_merge(&TokenGrid::new([3, 2, 2], 96, vec![0.0; 12 * 96]).unwrap(), &p).is_err());
    }

    #[test]
    fn unit_merge_with_identity_projection_is_identity() {
        let mut p = EmbedParams::new(2, 4, Some((1, 4)), &mut rng());
        let m = p.merge.clone().unwrap();
        let w = p.store.get_mut(m.proj.w);
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 5 == 0 { 1.0 } else { 0.0 });
        let g = TokenGrid::new([2, 2, 2], 4, rand_tensor(vec![32], 1).into_data()).unwrap();
        assert_eq!(hires_merge(&g, &p).unwrap().data, g.data);
    }

    #[test]
    fn block_concat_order() {
        let mut g = Graph::new();
        // 2x2x2 lattice, 1 channel, values = linear index
        let x = g.constant(Tensor::new(vec![2, 2, 2, 1], (0..8).map(|v| v as f64).collect()));
        let y = block_concat(&mut g, x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn token_count_parity() {
        for shape in [[160, 192, 224], [32, 32, 32], [16, 24, 40]] {
            let (_, p2) = padding_for(shape, 2);
            let (_, p4) = padding_for(shape, 4);
            let s2 = p2.map(|n| n / 2);
            assert!(s2.iter().all(|n| n % 2 == 0));
            assert_eq!(s2.map(|n| n / 2), p4.map(|n| n / 4));
        }
    }

    #[test]
    fn tokenizer_gradients() {
        let params = EmbedParams::new(2, 6, Some((2, 4)), &mut rng());
        let mut inputs: Vec<Tensor> = params.store.iter().map(|(_, t)| t.clone()).collect();
        for t in &mut inputs {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        inputs.push(rand_tensor(vec![3, 4, 4, 2], 3));
        let n = params.store.len();
        let err = check_gradients(&inputs, 1e-4, |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let x = params.embed.forward(g, &p, v[n], [1, 0, 0], [4, 4, 4]).unwrap();
            let x = positional_encode_var(g, x);
            let y = params.merge.as_ref().unwrap().forward(g, &p, x).unwrap();
            project(g, y, 5)
        });
        assert!(err <= 1e-5, "{err}");
    }
}
