//! Optimization loop, learning-rate schedules, evaluation and gradient
//! checking.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::field::{jacobian_stats, tre, warp, warp_labels, DeformationField, Interp, TreStats};
use crate::graph::{Graph, Real};
use crate::network::{build_model, Model, ModelConfig};
use crate::objectives::{dice_eval, total_loss_var, LossComponents, LossWeights};
use crate::params::{Bound, ParamId, ParamStore};
use crate::synth::{gen_phantom, gen_smooth_field};
use crate::tokenizer::stack_pair;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Scheduler {
    /// Half-cosine from `lr` at epoch 0 down to 0 one epoch past the last.
    Cosine,
    Step {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_every")]
        every: usize,
    },
    None,
}

fn default_gamma() -> f64 {
    0.5
}
fn default_every() -> usize {
    30
}

impl Scheduler {
    pub fn lr(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Scheduler::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
            Scheduler::Step { gamma, every } => base * gamma.powi((epoch / every.max(1)) as i32),
            Scheduler::None => base,
        }
    }
}

fn default_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    100
}
fn default_scheduler() -> Scheduler {
    Scheduler::Cosine
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_scheduler")]
    pub scheduler: Scheduler,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many optimizer steps (the last epoch may be partial).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Set from the `loss` section of a run config.
    #[serde(skip)]
    pub seg_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write `epoch_<k>.json` every this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Multires only: keep the second path frozen for this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multires_phase_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            scheduler: default_scheduler(),
            epochs: default_epochs(),
            max_steps: None,
            seg_fraction: 0.0,
            seed: 0,
            checkpoint_every: None,
            multires_phase_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr", format!("must be >= 0, got {}", self.lr));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(k, format!("must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps", "must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("train.epochs", "must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("train.max_steps", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.seg_fraction) {
            return bad("loss.seg_fraction", format!("must be in [0, 1], got {}", self.seg_fraction));
        }
        if let Scheduler::Step { gamma, every } = self.scheduler {
            if !(gamma > 0.0) || every == 0 {
                return bad("train.scheduler", "step needs gamma > 0 and every >= 1".into());
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("train.checkpoint_every", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.scheduler.lr(self.lr, epoch, self.epochs)
    }
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    t: Vec<u32>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<Real>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { beta1, beta2, eps, m: zeros.clone(), v: zeros, t: vec![0; store.len()] }
    }

    /// Update every parameter that received a gradient, then round back to
    /// storage precision.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &[Real])], lr: f64) {
        for &(id, g) in grads {
            let k = id_index(store, id);
            self.t[k] += 1;
            let t = self.t[k] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                p[i] = p[i] as f32 as f64;
            }
        }
    }
}

fn id_index(store: &ParamStore, id: ParamId) -> usize {
    store.ids().position(|i| i == id).expect("id belongs to store")
}

/// Indices of the validation split: the last `ceil(0.2·n)` pairs. With a
/// single pair, training and validation share it.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n <= 1 {
        return ((0..n).collect(), (0..n).collect());
    }
    let n_val = (n as f64 * 0.2).ceil() as usize;
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Training pairs whose Dice term is active: `round(fraction·n)` of the
/// pairs carrying segmentations, chosen by a seeded shuffle.
pub fn seg_active(pairs: &[&Pair], fraction: f64, seed: u64) -> Vec<bool> {
    let mut with_segs: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].segs().is_some()).collect();
    let k = (fraction * with_segs.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EC5_5EC5);
    with_segs.shuffle(&mut rng);
    let mut active = vec![false; pairs.len()];
    for &i in &with_segs[..k] {
        active[i] = true;
    }
    active
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub ncc: f64,
    pub bend: f64,
    /// Mean over steps with an active Dice term; NaN when none were.
    pub dice_loss: f64,
    pub val_dice: f64,
    pub val_negjac: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,total,ncc,bend,dice_loss,val_dice,val_negjac,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.total, r.ncc, r.bend, r.dice_loss, r.val_dice, r.val_negjac, r.lr
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// One step's loss components, for logging.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: f64,
    pub parts: LossComponents,
}

/// Forward, loss and gradients for one pair. Returns the loss and gradients
/// of every trainable parameter.
pub fn loss_and_grads(
    model: &Model,
    pair: &Pair,
    use_segs: bool,
    w: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(StepLoss, Vec<(ParamId, Vec<Real>)>)> {
    let mut g = Graph::new();
    let p = model.store.bind_with(&mut g, trainable);
    let x = g.constant(stack_pair(&pair.fixed, &pair.moving)?);
    let u = model.forward_var(&mut g, &p, x)?;
    if g.value(u).data().iter().any(|v| !v.is_finite()) {
        let parts = LossComponents { ncc: f64::NAN, bend: f64::NAN, dice: None };
        return Ok((StepLoss { total: f64::NAN, parts }, Vec::new()));
    }
    let segs = if use_segs { pair.segs() } else { None };
    let lv = total_loss_var(&mut g, &pair.fixed, &pair.moving, u, segs, w)?;
    let loss = StepLoss { total: g.value(lv.total).item(), parts: lv.components(&g) };
    let mut grads = g.backward(lv.total);
    let out = collect_grads(&model.store, &p, &mut grads);
    Ok((loss, out))
}

fn collect_grads(store: &ParamStore, p: &Bound, grads: &mut crate::graph::Gradients) -> Vec<(ParamId, Vec<Real>)> {
    store.ids().filter_map(|id| grads.take(p.var(id)).map(|g| (id, g))).collect()
}

/// Loss only (no gradients), with every parameter frozen.
pub fn loss_value(model: &Model, pair: &Pair, use_segs: bool, w: &LossWeights) -> Result<StepLoss> {
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let x = g.constant(stack_pair(&pair.fixed, &pair.moving)?);
    let u = model.forward_var(&mut g, &p, x)?;
    let segs = if use_segs { pair.segs() } else { None };
    let lv = total_loss_var(&mut g, &pair.fixed, &pair.moving, u, segs, w)?;
    Ok(StepLoss { total: g.value(lv.total).item(), parts: lv.components(&g) })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn population_sd(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Train a freshly built model. With `out`, writes `metrics.csv`,
/// `final.json`, `best.json` (highest validation Dice, or lowest training
/// loss without segmentations) and periodic epoch checkpoints.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    dataset: &[Pair],
    out: Option<&Path>,
) -> Result<RunArtifacts> {
    let model = build_model(model_cfg)?;
    train_model(model, cfg, weights, dataset, out)
}

pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    weights: &LossWeights,
    dataset: &[Pair],
    out: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    let shape = dataset[0].fixed.shape();
    for p in dataset {
        p.validate()?;
        if p.fixed.shape() != shape {
            return Err(Error::shape(format!("{}: shape {:?} differs from {shape:?}", p.name, p.fixed.shape())));
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (train_idx, val_idx) = split_indices(dataset.len());
    let train_pairs: Vec<&Pair> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let active = seg_active(&train_pairs, cfg.seg_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let phase = cfg.multires_phase_epochs.filter(|_| model.cfg.multires.is_some());

    let mut metrics = Vec::new();
    let mut steps = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_checkpoint = None;
    'epochs: for epoch in 0..cfg.epochs {
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let lr = cfg.lr_at(epoch);
        let frozen_second = phase.is_some_and(|k| epoch < k);
        let trainable = |name: &str| !(frozen_second && name.starts_with(Model::SECOND_PATH_PREFIX));
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut totals, mut nccs, mut bends, mut dices) = (vec![], vec![], vec![], vec![]);
        for &i in &order {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let (loss, grads) = loss_and_grads(&model, train_pairs[i], active[i], weights, trainable)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, step: steps + 1, loss: loss.total });
            }
            let refs: Vec<(ParamId, &[Real])> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
            adam.step(&mut model.store, &refs, lr);
            steps += 1;
            if model.store.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch: epoch + 1, step: steps, loss: loss.total });
            }
            totals.push(loss.total);
            nccs.push(loss.parts.ncc);
            bends.push(loss.parts.bend);
            if let Some(d) = loss.parts.dice {
                dices.push(d);
            }
        }
        let val: Vec<&Pair> = val_idx.iter().map(|&i| &dataset[i]).collect();
        let (val_dice, val_negjac) = validate(&model, &val)?.ok_or(Error::Diverged {
            epoch: epoch + 1,
            step: steps,
            loss: f64::NAN,
        })?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            steps: totals.len(),
            total: mean(&totals),
            ncc: mean(&nccs),
            bend: mean(&bends),
            dice_loss: mean(&dices),
            val_dice,
            val_negjac,
            lr,
        };
        if let Some(dir) = out {
            let score = if val_dice.is_finite() { val_dice } else { -row.total };
            if score > best_score {
                best_score = score;
                let path = dir.join("best.json");
                save_checkpoint(&model, &path)?;
                best_checkpoint = Some(path);
            }
            if cfg.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0) {
                save_checkpoint(&model, dir.join(format!("epoch_{}.json", epoch + 1)))?;
            }
        }
        metrics.push(row);
        if let Some(dir) = out {
            let path = dir.join("metrics.csv");
            fs::write(&path, metrics_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    let final_checkpoint = match out {
        Some(dir) => {
            let path = dir.join("final.json");
            save_checkpoint(&model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunArtifacts { model, metrics, steps, final_checkpoint, best_checkpoint })
}

/// Field for a pair, or `None` if the forward pass produced non-finite values.
fn finite_field(model: &Model, p: &Pair) -> Result<Option<DeformationField>> {
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let x = g.constant(stack_pair(&p.fixed, &p.moving)?);
    let u = model.forward_var(&mut g, &b, x)?;
    let data = g.value(u).data();
    if data.iter().any(|v| !v.is_finite() || v.abs() > f32::MAX as f64) {
        return Ok(None);
    }
    Ok(Some(DeformationField::from_real(p.fixed.shape(), data)?.with_spacing(p.fixed.spacing())))
}

/// Mean hard Dice (NaN without segmentations) and mean folding percentage;
/// `None` if any validation field is non-finite.
fn validate(model: &Model, pairs: &[&Pair]) -> Result<Option<(f64, f64)>> {
    let mut dice = Vec::new();
    let mut negjac = Vec::new();
    for p in pairs {
        let Some(f) = finite_field(model, p)? else { return Ok(None) };
        negjac.push(jacobian_stats(&f)?.neg_fraction);
        if let Some((sf, sm, n)) = p.segs() {
            dice.push(dice_eval(sf, &warp_labels(sm, &f)?, n)?.mean);
        }
    }
    Ok(Some((mean(&dice), mean(&negjac))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub dice: Option<f64>,
    pub dice_per_label: Option<Vec<f64>>,
    pub dice_pre: Option<f64>,
    pub neg_fraction: f64,
    pub min_det: f64,
    pub tre_mean: Option<f64>,
    pub tre_sd: Option<f64>,
    pub tre_pre_mean: Option<f64>,
    pub runtime_s: f64,
}

/// Mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| Self { mean: mean(xs), sd: population_sd(xs), n: xs.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub params: usize,
    pub pairs: Vec<PairMetrics>,
    pub dice: Option<Aggregate>,
    pub dice_pre: Option<Aggregate>,
    pub neg_fraction: Aggregate,
    pub tre: Option<Aggregate>,
    pub tre_pre: Option<Aggregate>,
    pub runtime_s: Aggregate,
}

impl MetricsReport {
    /// Aggregates recomputed from the per-pair rows.
    pub fn from_pairs(params: usize, pairs: Vec<PairMetrics>) -> Self {
        let col = |f: &dyn Fn(&PairMetrics) -> Option<f64>| pairs.iter().filter_map(f).collect::<Vec<f64>>();
        let dice = Aggregate::of(&col(&|p| p.dice));
        let dice_pre = Aggregate::of(&col(&|p| p.dice_pre));
        let tre = Aggregate::of(&col(&|p| p.tre_mean));
        let tre_pre = Aggregate::of(&col(&|p| p.tre_pre_mean));
        let empty = Aggregate { mean: f64::NAN, sd: f64::NAN, n: 0 };
        let neg_fraction = Aggregate::of(&col(&|p| Some(p.neg_fraction))).unwrap_or(empty);
        let runtime_s = Aggregate::of(&col(&|p| Some(p.runtime_s))).unwrap_or(empty);
        Self { params, pairs, dice, dice_pre, neg_fraction, tre, tre_pre, runtime_s }
    }
}

pub fn evaluate_pair(model: &Model, p: &Pair) -> Result<PairMetrics> {
    p.validate()?;
    let start = Instant::now();
    let f = model.forward(&p.fixed, &p.moving)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let jac = jacobian_stats(&f)?;
    let (mut dice, mut dice_per_label, mut dice_pre) = (None, None, None);
    if let Some((sf, sm, n)) = p.segs() {
        let d = dice_eval(sf, &warp_labels(sm, &f)?, n)?;
        dice = Some(d.mean);
        dice_per_label = Some(d.per_label);
        dice_pre = Some(dice_eval(sf, sm, n)?.mean);
    }
    let (mut tre_mean, mut tre_sd, mut tre_pre_mean) = (None, None, None);
    if let Some((lf, lm)) = p.landmarks() {
        let spacing = p.fixed.spacing();
        let t: TreStats = tre(lm, lf, &f, spacing)?;
        tre_mean = Some(t.mean);
        tre_sd = Some(t.sd);
        tre_pre_mean = Some(tre(lm, lf, &DeformationField::zeros(f.shape()), spacing)?.mean);
    }
    Ok(PairMetrics {
        name: p.name.clone(),
        dice,
        dice_per_label,
        dice_pre,
        neg_fraction: jac.neg_fraction,
        min_det: jac.min_det,
        tre_mean,
        tre_sd,
        tre_pre_mean,
        runtime_s,
    })
}

pub fn evaluate(model: &Model, dataset: &[Pair]) -> Result<MetricsReport> {
    let rows = dataset.iter().map(|p| evaluate_pair(model, p)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_pairs(model.count_params(), rows))
}

/// Register `moving` onto `fixed`: the field and the trilinearly warped
/// moving image.
pub fn register(model: &Model, fixed: &Volume, moving: &Volume) -> Result<(DeformationField, Volume)> {
    let f = model.forward(fixed, moving)?;
    let w = warp(moving, &f, Interp::Trilinear)?;
    Ok((f, w))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub entries: Vec<GradCheckEntry>,
    /// Loss components active in the checked objective.
    pub components: LossComponents,
}

/// Default model for [`grad_check`]: 8³ input, `C = 8`, EM-11, stride 2
/// with Hi-Res merging. The flow head starts large enough that sample
/// points sit away from the trilinear kinks at integer offsets.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig { embed_dim: 8, flow_init_std: 0.3, seed: 3, ..ModelConfig::with_variant(crate::network::Variant::Em11, 2, 8) }
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-8;
/// Target loss change per probe; the step is `delta / |analytic|`, clamped.
pub const GRAD_CHECK_LOSS_DELTA: f64 = 1e-9;
pub const GRAD_CHECK_STEP: (f64, f64) = (1e-7, 1e-3);

/// Central-difference check of `d total_loss / dθ` (NCC, bending and Dice
/// all active) at `per_tensor` sampled entries of every parameter tensor.
/// Each entry's step is scaled so the probe moves the loss by about
/// [`GRAD_CHECK_LOSS_DELTA`]: small enough to stay clear of LeakyReLU and
/// trilinear kinks, large enough to beat rounding on tiny gradients.
pub fn grad_check(cfg: &ModelConfig, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let size = [8, 8, 8];
    let ph = gen_phantom(seed, size, 2)?;
    let g = gen_smooth_field(seed + 1, size, 1.5, 2.0)?;
    let mut pair = Pair::new("grad_check", ph.image.clone(), warp(&ph.image, &g, Interp::Trilinear)?);
    pair.seg_moving = Some(warp_labels(&ph.labels, &g)?);
    pair.seg_fixed = Some(ph.labels);
    let model = build_model(cfg)?;
    grad_check_model(&model, &pair, per_tensor, seed)
}

pub fn grad_check_model(model: &Model, pair: &Pair, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let w = LossWeights { lambda_bend: 1.0, ncc_window: 5, ..LossWeights::default() };
    let (loss, grads) = loss_and_grads(model, pair, true, &w, |_| true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for id in model.store.ids() {
        let n = model.store.get(id).len();
        let analytic = grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice());
        for _ in 0..per_tensor.min(n) {
            let index = rng.random_range(0..n);
            let a = analytic.map_or(0.0, |g| g[index]);
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.store.get_mut(id).data_mut()[index] += delta;
                Ok(loss_value(&m, pair, true, &w)?.total)
            };
            let step = (GRAD_CHECK_LOSS_DELTA / a.abs()).clamp(GRAD_CHECK_STEP.0, GRAD_CHECK_STEP.1);
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let scale = a.abs().max(numeric.abs());
            let rel_err = (scale > GRAD_CHECK_FLOOR).then(|| (a - numeric).abs() / scale);
            entries.push(GradCheckEntry { param: model.store.name(id).to_string(), index, analytic: a, numeric, rel_err });
        }
    }
    let checked = entries.iter().filter(|e| e.rel_err.is_some()).count();
    let max_rel_err = entries.iter().filter_map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, checked, skipped: entries.len() - checked, entries, components: loss.parts })
}
