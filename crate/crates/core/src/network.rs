//! Encoder/decoder registration network.
//!
//! Each encoder path is: patch embedding, positional encoding, optional
//! Hi-Res merge (stride 2 only), efficient block 1, patch merge, efficient
//! block 2. The decoder upsamples the bottleneck back to input resolution
//! with `(trilinear ×2, 3³ conv, LeakyReLU)` stages and a 3-channel flow
//! head. Inputs are zero-padded to a multiple of the total downsampling
//! factor and the field is cropped back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{efficient_block, PatchMerge, Plane, TransformerBlock};
use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::graph::{Graph, Var};
use crate::nn::{upsample2x, Conv3};
use crate::params::{Bound, Init, ParamStore};
use crate::tokenizer::{padding_for, positional_encode_var, stack_pair, HiResMerge, PatchEmbed};
use crate::volume::{Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "EM-11")]
    Em11,
    #[serde(rename = "EM-23")]
    Em23,
}

impl Variant {
    /// Plane sequences of the two efficient blocks.
    pub fn planes(self) -> [Vec<Plane>; 2] {
        match self {
            Variant::Em11 => [vec![Plane::Xy], vec![Plane::Yz]],
            Variant::Em23 => [vec![Plane::Xy, Plane::Yz], vec![Plane::Xy, Plane::Yz, Plane::Zx]],
        }
    }
}

/// Channel width after the Hi-Res merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiresOut {
    #[default]
    CTimesD,
    C,
}

fn default_stride() -> usize {
    2
}
fn default_embed_dim() -> usize {
    16
}
fn default_merge_d() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_flow_std() -> f64 {
    1e-5
}
fn default_variant() -> Variant {
    Variant::Em11
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_merge_d")]
    pub merge_d: usize,
    #[serde(default)]
    pub hires_out: HiresOut,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Two distinct strides; normalized to `(larger, smaller)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multires: Option<[usize; 2]>,
    /// Replaces the variant's plane sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planes: Option<[Vec<Plane>; 2]>,
    /// Output channels of each decoder stage, coarse to fine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_channels: Option<Vec<usize>>,
    #[serde(default = "default_flow_std")]
    pub flow_init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            stride: default_stride(),
            embed_dim: default_embed_dim(),
            merge_d: default_merge_d(),
            hires_out: HiresOut::default(),
            n_heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
            multires: None,
            planes: None,
            decoder_channels: None,
            flow_init_std: default_flow_std(),
            seed: 0,
        }
    }
}

/// Geometry of one encoder path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathGeometry {
    pub stride: usize,
    /// Hi-Res merge factor (1 when inactive).
    pub d: usize,
    /// Channels of efficient block 1.
    pub c1: usize,
    /// Total downsampling from input to bottleneck.
    pub factor: usize,
}

impl PathGeometry {
    pub fn c2(&self) -> usize {
        2 * self.c1
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant, stride: usize, embed_dim: usize) -> Self {
        Self { variant, stride, embed_dim, ..Self::default() }
    }

    pub fn block_planes(&self) -> [Vec<Plane>; 2] {
        self.planes.clone().unwrap_or_else(|| self.variant.planes())
    }

    /// Strides of every encoder path, largest first.
    pub fn path_strides(&self) -> Vec<usize> {
        match self.multires {
            Some([a, b]) => vec![a.max(b), a.min(b)],
            None => vec![self.stride],
        }
    }

    pub fn path_geometry(&self, stride: usize) -> PathGeometry {
        let d = if stride == 2 { self.merge_d } else { 1 };
        let c1 = match (d, self.hires_out) {
            (1, _) | (_, HiresOut::C) => self.embed_dim,
            (_, HiresOut::CTimesD) => self.embed_dim * d,
        };
        PathGeometry { stride, d, c1, factor: stride * d * 2 }
    }

    pub fn paths(&self) -> Vec<PathGeometry> {
        self.path_strides().into_iter().map(|s| self.path_geometry(s)).collect()
    }

    /// Input padding multiple (the coarsest path's factor).
    pub fn pad_multiple(&self) -> usize {
        self.paths().iter().map(|p| p.factor).max().unwrap_or(1)
    }

    /// Downsampling of the shared decoder input (the finest path's factor).
    pub fn decoder_factor(&self) -> usize {
        self.paths().iter().map(|p| p.factor).min().unwrap_or(1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.paths().iter().map(PathGeometry::c2).sum()
    }

    pub fn decoder_stage_channels(&self) -> Vec<usize> {
        if let Some(ch) = &self.decoder_channels {
            return ch.clone();
        }
        let stages = self.decoder_factor().trailing_zeros() as usize;
        let mut c = self.bottleneck_channels();
        (0..stages)
            .map(|_| {
                c = (c / 2).max(4);
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        let check_stride = |path: &str, s: usize| {
            if [2, 4, 8].contains(&s) {
                Ok(())
            } else {
                bad(path, format!("stride must be 2, 4 or 8, got {s}"))
            }
        };
        check_stride("model.stride", self.stride)?;
        if let Some([a, b]) = self.multires {
            check_stride("model.multires", a)?;
            check_stride("model.multires", b)?;
            if a == b {
                return bad("model.multires", format!("strides must differ, got ({a}, {b})"));
            }
        }
        if self.embed_dim == 0 {
            return bad("model.embed_dim", "must be positive".into());
        }
        if ![1, 2, 4].contains(&self.merge_d) {
            return bad("model.merge_d", format!("must be 1, 2 or 4, got {}", self.merge_d));
        }
        if self.mlp_ratio == 0 {
            return bad("model.mlp_ratio", "must be positive".into());
        }
        if !(self.flow_init_std.is_finite() && self.flow_init_std >= 0.0) {
            return bad("model.flow_init_std", "must be finite and nonnegative".into());
        }
        for p in self.paths() {
            for c in [p.c1, p.c2()] {
                if self.n_heads == 0 || c % self.n_heads != 0 {
                    return bad("model.n_heads", format!("{} heads do not divide {c} channels", self.n_heads));
                }
            }
        }
        if let Some(ch) = &self.decoder_channels {
            let stages = self.decoder_factor().trailing_zeros() as usize;
            if ch.len() != stages || ch.contains(&0) {
                return bad("model.decoder_channels", format!("need {stages} positive entries, got {ch:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderPath {
    pub prefix: String,
    pub geom: PathGeometry,
    pub embed: PatchEmbed,
    pub hires: Option<HiResMerge>,
    pub planes: [Vec<Plane>; 2],
    pub block1: Vec<TransformerBlock>,
    pub merge: PatchMerge,
    pub block2: Vec<TransformerBlock>,
}

impl EncoderPath {
    /// `pair` is the unpadded `[H, W, D, 2]` stack; returns bottleneck tokens.
    fn forward(&self, g: &mut Graph, p: &Bound, pair: Var, pad_lo: [usize; 3], padded: Shape3) -> Result<Var> {
        let x = self.embed.forward(g, p, pair, pad_lo, padded)?;
        let mut x = positional_encode_var(g, x);
        if let Some(h) = &self.hires {
            x = h.forward(g, p, x)?;
        }
        let x = efficient_block(g, p, &self.planes[0], &self.block1, x)?;
        let x = self.merge.forward(g, p, x)?;
        efficient_block(g, p, &self.planes[1], &self.block2, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<Conv3>,
    pub flow: Conv3,
}

impl Decoder {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut x = x;
        for conv in &self.stages {
            x = upsample2x(g, x);
            x = conv.forward(g, p, x);
            x = g.leaky_relu(x, 0.2);
        }
        self.flow.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub paths: Vec<EncoderPath>,
    pub decoder: Decoder,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let multi = cfg.multires.is_some();
    let planes = cfg.block_planes();
    let mut paths = Vec::new();
    for (i, geom) in cfg.paths().into_iter().enumerate() {
        let prefix = if multi { format!("p{i}.") } else { String::new() };
        let embed = PatchEmbed::new(&mut store, &format!("{prefix}embed"), geom.stride, cfg.embed_dim, &mut rng);
        let hires = (geom.d > 1)
            .then(|| HiResMerge::new(&mut store, &format!("{prefix}hires"), cfg.embed_dim, geom.d, geom.c1, &mut rng));
        let blocks = |stage: usize, c: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            planes[stage - 1]
                .iter()
                .enumerate()
                .map(|(b, &pl)| {
                    TransformerBlock::new(store, &format!("{prefix}enc{stage}.b{b}"), pl, c, cfg.n_heads, cfg.mlp_ratio, rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let block1 = blocks(1, geom.c1, &mut store, &mut rng)?;
        let merge = PatchMerge::new(&mut store, &format!("{prefix}merge"), geom.c1, &mut rng);
        let block2 = blocks(2, geom.c2(), &mut store, &mut rng)?;
        paths.push(EncoderPath { prefix, geom, embed, hires, planes: planes.clone(), block1, merge, block2 });
    }
    let mut c = cfg.bottleneck_channels();
    let mut stages = Vec::new();
    for (i, &co) in cfg.decoder_stage_channels().iter().enumerate() {
        let init = Init::Kaiming { fan_in: 27 * c, slope: 0.2 };
        stages.push(Conv3::new(&mut store, &format!("dec.up{i}"), c, co, init, &mut rng));
        c = co;
    }
    let flow = Conv3::new(&mut store, "dec.flow", c, 3, Init::Normal(cfg.flow_init_std), &mut rng);
    Ok(Model { cfg: cfg.clone(), store, paths, decoder: Decoder { stages, flow } })
}

pub fn count_params(m: &Model) -> usize {
    m.store.count()
}

/// Nearest-neighbour replication of a token lattice by integer `k`.
fn replicate(g: &mut Graph, x: Var, k: usize) -> Var {
    if k == 1 {
        return x;
    }
    let s = g.shape(x).to_vec();
    let (dims, c) = ([s[0], s[1], s[2]], s[3]);
    let out = dims.map(|n| n * k);
    let mut index = Vec::with_capacity(out.iter().product::<usize>() * c);
    for h in 0..out[0] {
        for w in 0..out[1] {
            for d in 0..out[2] {
                let src = ((h / k) * dims[1] + w / k) * dims[2] + d / k;
                index.extend((0..c).map(|ch| src * c + ch));
            }
        }
    }
    g.gather(x, vec![out[0], out[1], out[2], c], index)
}

/// Crop a padded `[Ph, Pw, Pd, C]` map to `shape` starting at `lo`.
fn crop(g: &mut Graph, x: Var, lo: [usize; 3], shape: Shape3) -> Var {
    let s = g.shape(x).to_vec();
    if [s[0], s[1], s[2]] == shape {
        return x;
    }
    let c = s[3];
    let mut index = Vec::with_capacity(shape.iter().product::<usize>() * c);
    for h in 0..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                let src = ((h + lo[0]) * s[1] + w + lo[1]) * s[2] + d + lo[2];
                index.extend((0..c).map(|ch| src * c + ch));
            }
        }
    }
    g.gather(x, vec![shape[0], shape[1], shape[2], c], index)
}

impl Model {
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Displacement `[H, W, D, 3]` for the stacked `[H, W, D, 2]` pair.
    pub fn forward_var(&self, g: &mut Graph, p: &Bound, pair: Var) -> Result<Var> {
        let s = g.shape(pair).to_vec();
        if s.len() != 4 || s[3] != 2 {
            return Err(Error::shape(format!("model input must be [H, W, D, 2], got {s:?}")));
        }
        let shape = [s[0], s[1], s[2]];
        let (lo, padded) = padding_for(shape, self.cfg.pad_multiple());
        let fine = self.cfg.decoder_factor();
        let mut feats: Option<Var> = None;
        for path in &self.paths {
            let z = path.forward(g, p, pair, lo, padded)?;
            let z = replicate(g, z, path.geom.factor / fine);
            feats = Some(match feats {
                None => z,
                Some(acc) => g.concat_last(acc, z),
            });
        }
        let z = feats.ok_or_else(|| Error::invalid("model has no encoder path"))?;
        let u = self.decoder.forward(g, p, z);
        Ok(crop(g, u, lo, shape))
    }

    pub fn forward(&self, fixed: &Volume, moving: &Volume) -> Result<DeformationField> {
        let pair = stack_pair(fixed, moving)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(pair);
        let u = self.forward_var(&mut g, &p, x)?;
        Ok(DeformationField::from_real(fixed.shape(), g.value(u).data())?.with_spacing(fixed.spacing()))
    }

    pub fn forward_multires(&self, fixed: &Volume, moving: &Volume) -> Result<DeformationField> {
        if self.cfg.multires.is_none() {
            return Err(Error::invalid("model is not multi-resolution"));
        }
        self.forward(fixed, moving)
    }

    /// Name prefix of the second (finer-stride) path in multires models.
    pub const SECOND_PATH_PREFIX: &'static str = "p1.";
}
