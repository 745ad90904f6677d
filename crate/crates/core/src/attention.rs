//! Plane attention, pre-norm transformer blocks, patch merging and an exact
//! cost ledger for attention strategies.
//!
//! A plane restricts self-attention to tokens sharing one lattice
//! coordinate: `xy` attends within each fixed-`d` slice, `yz` within each
//! fixed-`h` slice and `zx` within each fixed-`w` slice.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{axpy, dot, Graph, Real, Tensor, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, Init, ParamStore};
use crate::tokenizer::{block_concat, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Yz,
    Zx,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Yz, Plane::Zx];

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Xy => "xy",
            Plane::Yz => "yz",
            Plane::Zx => "zx",
        }
    }

    /// Token indices of every slice, one `Vec` per slice. All slices of a
    /// plane have the same length.
    pub fn slices(self, dims: [usize; 3]) -> Vec<Vec<usize>> {
        let [h_n, w_n, d_n] = dims;
        let idx = |h: usize, w: usize, d: usize| (h * w_n + w) * d_n + d;
        match self {
            Plane::Xy => (0..d_n)
                .map(|d| (0..h_n).flat_map(|h| (0..w_n).map(move |w| idx(h, w, d))).collect())
                .collect(),
            Plane::Yz => (0..h_n)
                .map(|h| (0..w_n).flat_map(|w| (0..d_n).map(move |d| idx(h, w, d))).collect())
                .collect(),
            Plane::Zx => (0..w_n)
                .map(|w| (0..d_n).flat_map(|d| (0..h_n).map(move |h| idx(h, w, d))).collect())
                .collect(),
        }
    }

    /// Number of slices and tokens per slice.
    pub fn slice_geometry(self, dims: [usize; 3]) -> (usize, usize) {
        let [h, w, d] = dims;
        match self {
            Plane::Xy => (d, h * w),
            Plane::Yz => (h, w * d),
            Plane::Zx => (w, d * h),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xy" => Ok(Plane::Xy),
            "yz" => Ok(Plane::Yz),
            "zx" => Ok(Plane::Zx),
            other => Err(Error::invalid(format!("unknown plane {other:?} (expected xy, yz or zx)"))),
        }
    }
}

/// Softmax probabilities saved by one plane-attention call:
/// `[slice][head][query][key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs {
    pub n_slices: usize,
    pub n_heads: usize,
    pub slice_len: usize,
    pub data: Vec<Real>,
}

impl AttentionProbs {
    pub fn row(&self, slice: usize, head: usize, query: usize) -> &[Real] {
        let l = self.slice_len;
        let start = ((slice * self.n_heads + head) * l + query) * l;
        &self.data[start..start + l]
    }
}

/// Multi-head scaled dot-product attention of projected `q`, `k`, `v`
/// (each `[H, W, D, C]`) within the slices of `plane`. Returns the
/// concatenated head outputs (before the output projection) and the
/// softmax probabilities.
pub fn plane_attention_core(g: &mut Graph, q: Var, k: Var, v: Var, plane: Plane, n_heads: usize) -> Result<(Var, AttentionProbs)> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 4 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(Error::shape(format!("q/k/v shapes {:?} {:?} {:?}", shape, g.shape(k), g.shape(v))));
    }
    let c = shape[3];
    if n_heads == 0 || c % n_heads != 0 {
        return Err(Error::shape(format!("{n_heads} heads do not divide {c} channels")));
    }
    let dk = c / n_heads;
    let dims = [shape[0], shape[1], shape[2]];
    let slices = plane.slices(dims);
    let l = slices.first().map_or(0, Vec::len);
    let inv = 1.0 / (dk as Real).sqrt();
    let (qv, kv, vv) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
    let mut out = vec![0.0; qv.len()];
    let mut probs = vec![0.0; slices.len() * n_heads * l * l];
    for (s, toks) in slices.iter().enumerate() {
        for h in 0..n_heads {
            let off = h * dk;
            let p = &mut probs[(s * n_heads + h) * l * l..(s * n_heads + h + 1) * l * l];
            for (i, &ti) in toks.iter().enumerate() {
                let qi = &qv[ti * c + off..ti * c + off + dk];
                let row = &mut p[i * l..(i + 1) * l];
                let mut max = Real::NEG_INFINITY;
                for (j, &tj) in toks.iter().enumerate() {
                    let sij = dot(qi, &kv[tj * c + off..tj * c + off + dk]) * inv;
                    row[j] = sij;
                    max = max.max(sij);
                }
                let mut z = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    z += *e;
                }
                row.iter_mut().for_each(|e| *e /= z);
                let oi = &mut out[ti * c + off..ti * c + off + dk];
                for (j, &tj) in toks.iter().enumerate() {
                    axpy(row[j], &vv[tj * c + off..tj * c + off + dk], oi);
                }
            }
        }
    }
    let report = AttentionProbs { n_slices: slices.len(), n_heads, slice_len: l, data: probs.clone() };
    let y = g.push(
        Tensor::new(shape, out),
        &[q, k, v],
        Box::new(move |inp, _, gout, needs| {
            let (qv, kv, vv) = (inp[0].data(), inp[1].data(), inp[2].data());
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            let mut gv = vec![0.0; vv.len()];
            let mut ds = vec![0.0; l];
            for (s, toks) in slices.iter().enumerate() {
                for h in 0..n_heads {
                    let off = h * dk;
                    let p = &probs[(s * n_heads + h) * l * l..(s * n_heads + h + 1) * l * l];
                    for (i, &ti) in toks.iter().enumerate() {
                        let row = &p[i * l..(i + 1) * l];
                        let go = &gout[ti * c + off..ti * c + off + dk];
                        let mut mean = 0.0;
                        for (j, &tj) in toks.iter().enumerate() {
                            let dp = dot(go, &vv[tj * c + off..tj * c + off + dk]);
                            ds[j] = dp;
                            mean += row[j] * dp;
                            if needs[2] {
                                axpy(row[j], go, &mut gv[tj * c + off..tj * c + off + dk]);
                            }
                        }
                        for j in 0..l {
                            ds[j] = row[j] * (ds[j] - mean) * inv;
                        }
                        let qi = &qv[ti * c + off..ti * c + off + dk];
                        for (j, &tj) in toks.iter().enumerate() {
                            if needs[0] {
                                axpy(ds[j], &kv[tj * c + off..tj * c + off + dk], &mut gq[ti * c + off..ti * c + off + dk]);
                            }
                            if needs[1] {
                                axpy(ds[j], qi, &mut gk[tj * c + off..tj * c + off + dk]);
                            }
                        }
                    }
                }
            }
            vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
        }),
    );
    Ok((y, report))
}

/// Q, K, V and output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub c: usize,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), c, c, Init::TruncNormal(0.02), rng);
        let (q, k, v, o) = (lin("q"), lin("k"), lin("v"), lin("o"));
        Self { q, k, v, o, n_heads, c }
    }

    pub fn param_count(c: usize) -> usize {
        4 * c * c + 4 * c
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, plane: Plane) -> Result<(Var, AttentionProbs)> {
        let c = g.shape(x).last().copied().unwrap_or(0);
        if c != self.c {
            return Err(Error::shape(format!("tokens have {c} channels, layer expects {}", self.c)));
        }
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let (a, probs) = plane_attention_core(g, q, k, v, plane, self.n_heads)?;
        Ok((self.o.forward(g, p, a), probs))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub plane: Plane,
    pub ln1: LayerNorm,
    pub attn: AttentionLayer,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        plane: Plane,
        c: usize,
        n_heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || c % n_heads != 0 {
            return Err(Error::invalid(format!("{n_heads} heads do not divide {c} channels")));
        }
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), c);
        let attn = AttentionLayer::new(store, &format!("{name}.attn"), c, n_heads, rng);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), c);
        let hidden = mlp_ratio * c;
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), c, hidden, Init::TruncNormal(0.02), rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), hidden, c, Init::TruncNormal(0.02), rng);
        Ok(Self { plane, ln1, attn, ln2, fc1, fc2 })
    }

    pub fn param_count(c: usize, mlp_ratio: usize) -> usize {
        4 * c + AttentionLayer::param_count(c) + Linear::param_count(c, mlp_ratio * c) + Linear::param_count(mlp_ratio * c, c)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = self.ln1.forward(g, p, x);
        let (a, _) = self.attn.forward(g, p, n, self.plane)?;
        let x = g.add(x, a);
        let n = self.ln2.forward(g, p, x);
        let h = self.fc1.forward(g, p, n);
        let h = g.gelu(h);
        let m = self.fc2.forward(g, p, h);
        Ok(g.add(x, m))
    }
}

/// Sequential composition of transformer blocks.
pub fn efficient_block(g: &mut Graph, p: &Bound, planes: &[Plane], blocks: &[TransformerBlock], x: Var) -> Result<Var> {
    if planes.len() != blocks.len() {
        return Err(Error::invalid(format!("{} planes but {} blocks", planes.len(), blocks.len())));
    }
    let mut x = x;
    for (plane, block) in planes.iter().zip(blocks) {
        if *plane != block.plane {
            return Err(Error::invalid(format!("plane {plane} given to a {} block", block.plane)));
        }
        x = block.forward(g, p, x)?;
    }
    Ok(x)
}

/// 2×2×2 token merge with a linear `8c → 2c` projection.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Linear,
    pub c: usize,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), 8 * c, 2 * c, Init::TruncNormal(0.02), rng);
        Self { proj, c }
    }

    pub fn param_count(c: usize) -> usize {
        Linear::param_count(8 * c, 2 * c)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let merged = block_concat(g, x, 2)?;
        Ok(self.proj.forward(g, p, merged))
    }
}

/// Standalone parameters for one transformer block (or merge layer).
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub store: ParamStore,
    pub block: TransformerBlock,
}

impl BlockParams {
    pub fn new(plane: Plane, c: usize, n_heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "block", plane, c, n_heads, mlp_ratio, rng)?;
        Ok(Self { store, block })
    }
}

fn check_tokens(grid: &TokenGrid, c: usize) -> Result<()> {
    if grid.c_tok != c {
        return Err(Error::shape(format!("grid has {} channels, parameters expect {c}", grid.c_tok)));
    }
    Ok(())
}

/// Plane attention (projections and output projection) on a token grid;
/// also returns the softmax probabilities.
pub fn plane_attention_probs(grid: &TokenGrid, plane: Plane, p: &BlockParams) -> Result<(TokenGrid, AttentionProbs)> {
    check_tokens(grid, p.block.attn.c)?;
    let mut g = Graph::new();
    let b = p.store.bind_frozen(&mut g);
    let x = grid.to_var(&mut g);
    let (y, probs) = p.block.attn.forward(&mut g, &b, x, plane)?;
    Ok((TokenGrid::from_var(&g, y), probs))
}

pub fn plane_attention(grid: &TokenGrid, plane: Plane, p: &BlockParams) -> Result<TokenGrid> {
    plane_attention_probs(grid, plane, p).map(|(t, _)| t)
}

/// Full transformer block on a token grid, attending in `plane`.
pub fn transformer_block(grid: &TokenGrid, plane: Plane, p: &BlockParams) -> Result<TokenGrid> {
    check_tokens(grid, p.block.attn.c)?;
    let mut block = p.block.clone();
    block.plane = plane;
    let mut g = Graph::new();
    let b = p.store.bind_frozen(&mut g);
    let x = grid.to_var(&mut g);
    let y = block.forward(&mut g, &b, x)?;
    Ok(TokenGrid::from_var(&g, y))
}

/// Apply one block per plane entry, in order.
pub fn efficient_block_grid(grid: &TokenGrid, planes: &[Plane], p_list: &[BlockParams]) -> Result<TokenGrid> {
    if planes.len() != p_list.len() {
        return Err(Error::invalid(format!("{} planes but {} parameter sets", planes.len(), p_list.len())));
    }
    let mut out = grid.clone();
    for (&plane, p) in planes.iter().zip(p_list) {
        out = transformer_block(&out, plane, p)?;
    }
    Ok(out)
}

pub fn patch_merge(grid: &TokenGrid, store: &ParamStore, merge: &PatchMerge) -> Result<TokenGrid> {
    check_tokens(grid, merge.c)?;
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = grid.to_var(&mut g);
    let y = merge.forward(&mut g, &b, x)?;
    Ok(TokenGrid::from_var(&g, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnStrategy {
    Full,
    Plane(Plane),
}

impl AttnStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AttnStrategy::Full => "full",
            AttnStrategy::Plane(p) => p.as_str(),
        }
    }
}

impl FromStr for AttnStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            Ok(AttnStrategy::Full)
        } else {
            s.parse().map(AttnStrategy::Plane)
        }
    }
}

/// Exact per-block attention cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub score_elems: u64,
    pub params: u64,
    pub proj_flops: u64,
    pub score_flops: u64,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        self.proj_flops + self.score_flops
    }
}

/// Score elements are counted once per (query, key) pair, independent of
/// the head split. Projection FLOPs cover Q, K, V and output (2 per
/// multiply-add); score FLOPs cover `QKᵀ` and `PV`.
pub fn attn_cost(dims: [usize; 3], c_tok: usize, strategy: AttnStrategy) -> CostReport {
    let [h, w, d] = dims.map(|n| n as u64);
    let c = c_tok as u64;
    let n = h * w * d;
    let score_elems = match strategy {
        AttnStrategy::Full => n * n,
        AttnStrategy::Plane(Plane::Xy) => d * (h * w) * (h * w),
        AttnStrategy::Plane(Plane::Yz) => h * (w * d) * (w * d),
        AttnStrategy::Plane(Plane::Zx) => w * (d * h) * (d * h),
    };
    CostReport {
        score_elems,
        params: 4 * c * c + 4 * c,
        proj_flops: 2 * n * c * c * 4,
        score_flops: 4 * score_elems * c,
    }
}

pub const COST_CSV_HEADER: &str = "strategy,dims,score_elems,params,flops,full_ratio";

/// Strategies reported by the benchmark, in output order.
pub const BENCH_STRATEGIES: [AttnStrategy; 4] =
    [AttnStrategy::Full, AttnStrategy::Plane(Plane::Xy), AttnStrategy::Plane(Plane::Yz), AttnStrategy::Plane(Plane::Zx)];

/// One CSV row; `full_ratio` is the full-attention score count divided by
/// this strategy's (always an integer).
pub fn cost_csv_row(dims: [usize; 3], c_tok: usize, strategy: AttnStrategy) -> String {
    let r = attn_cost(dims, c_tok, strategy);
    let full = attn_cost(dims, c_tok, AttnStrategy::Full);
    format!(
        "{},{}x{}x{},{},{},{},{}",
        strategy.name(),
        dims[0],
        dims[1],
        dims[2],
        r.score_elems,
        r.params,
        r.flops(),
        full.score_elems / r.score_elems
    )
}

pub fn cost_csv(dims: [usize; 3], c_tok: usize) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for s in BENCH_STRATEGIES {
        out.push_str(&cost_csv_row(dims, c_tok, s));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::{check_gradients, project, rand_tensor};
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_grid(dims: [usize; 3], c: usize, seed: u64) -> TokenGrid {
        let n = dims.iter().product::<usize>() * c;
        TokenGrid::new(dims, c, rand_tensor(vec![n], seed).into_data()).unwrap()
    }

    /// Block params with projections scaled up so attention is not flat.
    fn sharp_params(plane: Plane, c: usize, heads: usize, seed: u64) -> BlockParams {
        scaled_params(plane, c, heads, seed, 25.0)
    }

    fn scaled_params(plane: Plane, c: usize, heads: usize, seed: u64, scale: Real) -> BlockParams {
        let mut p = BlockParams::new(plane, c, heads, 4, &mut rng(seed)).unwrap();
        for id in p.store.ids().collect::<Vec<_>>() {
            p.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        p.store.round_to_storage();
        p
    }

    fn set_identity(store: &mut ParamStore, lin: &Linear) {
        let n = lin.n_in;
        let w = store.get_mut(lin.w);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i / n == i % n { 1.0 } else { 0.0 };
        }
    }

    #[test]
    fn plane_slices_partition_tokens() {
        let dims = [2, 3, 4];
        for plane in Plane::ALL {
            let slices = plane.slices(dims);
            let (n, l) = plane.slice_geometry(dims);
            assert_eq!(slices.len(), n);
            let mut all: Vec<usize> = slices.iter().inspect(|s| assert_eq!(s.len(), l)).flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..24).collect::<Vec<_>>());
        }
        // xy slice d=1 holds exactly the tokens with d == 1
        assert!(Plane::Xy.slices(dims)[1].iter().all(|t| t % 4 == 1));
        assert!(Plane::Yz.slices(dims)[1].iter().all(|t| t / 12 == 1));
        assert!(Plane::Zx.slices(dims)[2].iter().all(|t| (t / 4) % 3 == 2));
    }

    #[test]
    fn single_key_outputs_value_projection() {
        let mut p = sharp_params(Plane::Xy, 8, 2, 1);
        set_identity(&mut p.store, &p.block.attn.o.clone());
        let grid = rand_grid([1, 1, 5], 8, 2);
        let (out, probs) = plane_attention_probs(&grid, Plane::Xy, &p).unwrap();
        assert!(probs.data.iter().all(|&v| v == 1.0));
        let w = p.store.get(p.block.attn.v.w).data();
        for t in 0..5 {
            let x = &grid.data[t * 8..(t + 1) * 8];
            for o in 0..8 {
                let expect = dot(&w[o * 8..(o + 1) * 8], x);
                assert!((out.data[t * 8 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let c = 4;
        let mut p = BlockParams::new(Plane::Xy, c, 1, 4, &mut rng(0)).unwrap();
        let attn = p.block.attn.clone();
        // zero Q gives logits (0, 0)
        p.store.get_mut(attn.q.w).data_mut().fill(0.0);
        set_identity(&mut p.store, &attn.v);
        set_identity(&mut p.store, &attn.o);
        let grid = TokenGrid::new([2, 1, 1], c, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = plane_attention(&grid, Plane::Xy, &p).unwrap();
        assert_eq!(out.data, vec![3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn xy_attention_isolates_slices() {
        let p = sharp_params(Plane::Xy, 8, 4, 3);
        let grid = rand_grid([8, 8, 8], 8, 4);
        let mut bumped = grid.clone();
        for h in 0..8 {
            for w in 0..8 {
                let t = (h * 8 + w) * 8 + 3;
                bumped.data[t * 8] += 0.5;
            }
        }
        let a = plane_attention(&grid, Plane::Xy, &p).unwrap();
        let b = plane_attention(&bumped, Plane::Xy, &p).unwrap();
        for t in 0..512 {
            let same = a.data[t * 8..(t + 1) * 8] == b.data[t * 8..(t + 1) * 8];
            assert_eq!(same, t % 8 != 3, "token {t}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for plane in Plane::ALL {
            let p = sharp_params(plane, 8, 4, 5);
            let (_, probs) = plane_attention_probs(&rand_grid([3, 4, 5], 8, 6), plane, &p).unwrap();
            for s in 0..probs.n_slices {
                for h in 0..probs.n_heads {
                    for q in 0..probs.slice_len {
                        assert!((probs.row(s, h, q).iter().sum::<Real>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_a_slice_permutes_outputs() {
        let p = sharp_params(Plane::Xy, 8, 2, 7);
        let grid = rand_grid([2, 2, 2], 8, 8);
        let mut swapped = grid.clone();
        // swap tokens (0,0,0) and (1,1,0), both in xy slice d = 0
        let (a, b) = (0, 6);
        for ch in 0..8 {
            swapped.data.swap(a * 8 + ch, b * 8 + ch);
        }
        let o1 = plane_attention(&grid, Plane::Xy, &p).unwrap();
        let o2 = plane_attention(&swapped, Plane::Xy, &p).unwrap();
        for ch in 0..8 {
            assert!((o1.data[a * 8 + ch] - o2.data[b * 8 + ch]).abs() < 1e-12);
            assert!((o1.data[b * 8 + ch] - o2.data[a * 8 + ch]).abs() < 1e-12);
        }
        assert_eq!(o1.data[8..16], o2.data[8..16]);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut p = BlockParams::new(Plane::Yz, 8, 4, 4, &mut rng(0)).unwrap();
        for lin in [p.block.attn.o.clone(), p.block.fc2.clone()] {
            p.store.get_mut(lin.w).data_mut().fill(0.0);
        }
        let grid = rand_grid([2, 3, 2], 8, 1);
        assert_eq!(transformer_block(&grid, Plane::Yz, &p).unwrap().data, grid.data);
    }

    #[test]
    fn block_preserves_shape() {
        let p = BlockParams::new(Plane::Xy, 192, 4, 4, &mut rng(0)).unwrap();
        let grid = rand_grid([8, 8, 8], 192, 1);
        let out = transformer_block(&grid, Plane::Xy, &p).unwrap();
        assert_eq!((out.dims, out.c_tok), ([8, 8, 8], 192));
        assert_eq!(p.store.count(), TransformerBlock::param_count(192, 4));
    }

    #[test]
    fn channel_and_head_errors() {
        let p = BlockParams::new(Plane::Xy, 8, 4, 4, &mut rng(0)).unwrap();
        assert!(matches!(plane_attention(&rand_grid([2, 2, 2], 12, 0), Plane::Xy, &p), Err(Error::Shape(_))));
        assert!(BlockParams::new(Plane::Xy, 10, 4, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let p = sharp_params(Plane::Zx, 8, 2, 11);
        let mut inputs: Vec<Tensor> = p.store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(rand_tensor(vec![2, 2, 2, 8], 12));
        let n = p.store.len();
        let err = check_gradients(&inputs, 1e-5, |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let y = p.block.forward(g, &b, v[n]).unwrap();
            project(g, y, 13)
        });
        assert!(err <= 1e-4, "{err}");

        // plain sum of the output, step 1e-3
        let p = scaled_params(Plane::Zx, 8, 2, 11, 5.0);
        let mut inputs: Vec<Tensor> = p.store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(rand_tensor(vec![2, 2, 2, 8], 12));
        let err = check_gradients(&inputs, 1e-3, |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let y = p.block.forward(g, &b, v[n]).unwrap();
            g.sum(y)
        });
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn xy_then_yz_reaches_every_token() {
        let blocks: Vec<BlockParams> = [Plane::Xy, Plane::Yz].iter().map(|&pl| scaled_params(pl, 4, 1, pl as u64, 5.0)).collect();
        let grid = rand_grid([2, 2, 2], 4, 9);
        let base = efficient_block_grid(&grid, &[Plane::Xy, Plane::Yz], &blocks).unwrap();
        for src in 0..8 {
            let mut bumped = grid.clone();
            bumped.data[src * 4] += 1e-3;
            let out = efficient_block_grid(&bumped, &[Plane::Xy, Plane::Yz], &blocks).unwrap();
            for t in 0..8 {
                let diff: Real = (0..4).map(|ch| (out.data[t * 4 + ch] - base.data[t * 4 + ch]).abs()).sum();
                assert!(diff > 0.0, "token {t} blind to {src}");
            }
        }
    }

    #[test]
    fn efficient_block_edge_cases() {
        let grid = rand_grid([2, 2, 2], 8, 0);
        assert_eq!(efficient_block_grid(&grid, &[], &[]).unwrap(), grid);
        let p = BlockParams::new(Plane::Xy, 8, 4, 4, &mut rng(0)).unwrap();
        assert!(efficient_block_grid(&grid, &[Plane::Xy, Plane::Yz], &[p]).is_err());
    }

    #[test]
    fn patch_merge_shapes_and_selector() {
        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, "merge", 192, &mut rng(0));
        assert_eq!(store.count(), 590_208);
        assert_eq!(PatchMerge::param_count(192), 8 * 192 * 384 + 384);
        let out = patch_merge(&rand_grid([8, 8, 8], 192, 1), &store, &m).unwrap();
        assert_eq!((out.dims, out.c_tok), ([4, 4, 4], 384));
        assert!(patch_merge(&rand_grid([3, 2, 2], 192, 1), &store, &m).is_err());

        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, "merge", 2, &mut rng(0));
        // select the offset-(0,0,0) channels into the first two outputs
        let w = store.get_mut(m.proj.w).data_mut();
        w.fill(0.0);
        w[0] = 1.0;
        w[16 + 1] = 1.0;
        let grid = rand_grid([4, 2, 2], 2, 3);
        let out = patch_merge(&grid, &store, &m).unwrap();
        for th in 0..2 {
            let src = (2 * th * 2) * 2;
            assert_eq!(out.data[th * 4..th * 4 + 2], grid.data[src * 2..src * 2 + 2]);
        }
    }

    #[test]
    fn cost_ledger_examples() {
        let full = attn_cost([8, 8, 8], 96, AttnStrategy::Full);
        let xy = attn_cost([8, 8, 8], 96, AttnStrategy::Plane(Plane::Xy));
        assert_eq!((full.score_elems, xy.score_elems), (262_144, 32_768));
        assert_eq!(full.params, xy.params);
        for s in [AttnStrategy::Full, AttnStrategy::Plane(Plane::Yz)] {
            assert_eq!(attn_cost([1, 1, 1], 8, s).score_elems, 1);
        }
        let big = [40, 48, 56];
        assert_eq!(attn_cost(big, 8, AttnStrategy::Full).score_elems, 107_520 * 107_520);
        assert_eq!(attn_cost(big, 8, AttnStrategy::Plane(Plane::Xy)).score_elems, 56 * 1920 * 1920);
        assert_eq!(cost_csv_row([8, 8, 8], 96, AttnStrategy::Plane(Plane::Xy)), format!("xy,8x8x8,32768,{},{},8", xy.params, xy.flops()));
        let csv = cost_csv([2, 3, 5], 4);
        let ratios: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(ratios, ["1", "5", "2", "3"]);
    }

    proptest::proptest! {
        #[test]
        fn full_over_xy_ratio_is_depth(h in 1usize..64, w in 1usize..64, d in 1usize..64, c in 1usize..256) {
            let full = attn_cost([h, w, d], c, AttnStrategy::Full).score_elems;
            let xy = attn_cost([h, w, d], c, AttnStrategy::Plane(Plane::Xy)).score_elems;
            proptest::prop_assert_eq!(full, xy * d as u64);
        }
    }
}
