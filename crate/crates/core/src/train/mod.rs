//! Three-phase training: the primary extractor alone, then fusion with
//! frozen extractors, then everything together.

pub mod adam;
pub mod eval;
pub mod plateau;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use plateau::{Plateau, PlateauConfig};

use crate::data::sets::context_label;
use crate::data::{blackout_plan, build_set_plans, AugmentConfig, AugmentParams, ImageSource, Record, SetPlan};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::Metrics;
use crate::model::{self, batch_mean, compound_loss_on, CiffModel, LossConfig};
use crate::params::{in_groups, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use eval::{black_feature, describe, score_plans, score_single, FeatureCache, Path};

/// Learning rates of the multi-phase ablation, offered as a preset.
pub const ABLATION_LEARNING_RATES: [f64; 3] = [0.01, 0.0075, 0.006];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rates: [f64; 3],
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub augment: AugmentConfig,
    /// Describe images once at the start of the frozen phase instead of
    /// running the frozen extractors on augmented images every epoch.
    pub cache_frozen_features: bool,
    /// Probability that a training context is blacked out (phases 2 and 3).
    pub blackout: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: [1e-3, 1e-4, 1e-5],
            epochs: [40, 30, 30],
            batch_size: 32,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            augment: AugmentConfig::default(),
            cache_frozen_features: true,
            blackout: 0.0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.blackout) {
            return Err(Error::Validation(format!("blackout probability {} is outside [0, 1]", self.blackout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(Error::Validation(format!("learning rate {lr} must be positive")));
        }
        Ok(())
    }
}

/// One phase of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Phase {
    pub lr: f64,
    pub epochs: usize,
    pub frozen: Vec<&'static str>,
    pub context_enabled: bool,
}

pub fn schedule(cfg: &TrainConfig) -> [Phase; 3] {
    let phase = |i: usize, frozen: Vec<&'static str>, context_enabled| Phase {
        lr: cfg.learning_rates[i],
        epochs: cfg.epochs[i],
        frozen,
        context_enabled,
    };
    [phase(0, vec![], false), phase(1, model::EXTRACTOR_GROUPS.to_vec(), true), phase(2, vec![], true)]
}

/// Independent stream for a labelled position in the run.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const VAL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, like phase and epoch.
    pub fold: usize,
    pub phase: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub val_sensitivity: Option<f64>,
    pub val_specificity: Option<f64>,
    pub val_accuracy: f64,
}

/// Parameters with the best validation AUC seen in the current phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub auc: f64,
    pub params: ParamStore,
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: CiffModel,
    pub adam: AdamState,
    pub plateau: Plateau,
    /// Index of the phase in progress; 3 once all phases are done.
    pub phase: usize,
    /// Epochs finished within `phase`.
    pub epoch: usize,
    pub best: Option<Best>,
    pub logs: Vec<EpochLog>,
    /// Validation metrics of the context-free model after phase 1.
    pub baseline: Option<Metrics>,
}

impl TrainState {
    pub fn new(model: CiffModel, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            adam: AdamState::default(),
            plateau: Plateau::new(cfg.learning_rates[0]),
            phase: 0,
            epoch: 0,
            best: None,
            logs: Vec::new(),
            baseline: None,
        }
    }
}

/// Record indices of one fold with the images behind them.
#[derive(Clone, Copy)]
pub struct FoldData<'a> {
    pub records: &'a [Record],
    pub images: &'a dyn ImageSource,
    pub train: &'a [usize],
    pub val: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub seed: u64,
    pub fold: usize,
    /// False stops after phase 1, giving the context-free baseline.
    pub context: bool,
}

/// Fixed validation sets of a fold.
pub fn val_plans(data: &FoldData<'_>, m: usize, opts: &RunOptions) -> Result<Vec<SetPlan>> {
    let mut rng = derive_rng(opts.seed, &[opts.fold as u64, VAL_STREAM]);
    build_set_plans(data.records, data.val, m, &mut rng)
}

fn as_divergence(phase: usize, epoch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Divergence { phase: phase + 1, epoch: epoch + 1, detail },
        other => other,
    }
}

/// Runs (or resumes) the schedule from `state`. `on_epoch` sees the state
/// after every epoch and after every phase change.
pub fn run_phases(
    mut state: TrainState,
    data: &FoldData<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let phases = schedule(cfg);
    let last = if opts.context { 3 } else { 1 };
    let m = state.model.config.m;
    let val = if opts.context { val_plans(data, m, opts)? } else { Vec::new() };

    while state.phase < last {
        let p = state.phase;
        let phase = &phases[p];
        if state.epoch == 0 && phase.epochs > 0 && p < 2 {
            calibrate(&mut state.model, data, p).context(|| format!("phase {} calibration", p + 1))?;
        }
        let cache = if p == 1 && cfg.cache_frozen_features && state.epoch < phase.epochs {
            Some(train_cache(&state.model, data, &val)?)
        } else {
            None
        };
        while state.epoch < phase.epochs {
            let e = state.epoch;
            let mut rng = derive_rng(opts.seed, &[opts.fold as u64, p as u64, e as u64]);
            let lr = state.plateau.lr;
            let train_loss = if phase.context_enabled {
                context_epoch(&mut state, data, cfg, phase, cache.as_ref(), &mut rng)
            } else {
                single_epoch(&mut state, data, cfg, &mut rng)
            }
            .map_err(as_divergence(p, e))
            .context(|| format!("phase {} epoch {}", p + 1, e + 1))?;
            if !train_loss.is_finite() {
                return Err(Error::Divergence {
                    phase: p + 1,
                    epoch: e + 1,
                    detail: format!("train loss {train_loss}"),
                });
            }
            let (val_loss, metrics) = validate(&state.model, data, cfg, phase, cache.as_ref(), &val)
                .context(|| format!("validation after phase {} epoch {}", p + 1, e + 1))?;
            state.plateau.step(val_loss, &cfg.plateau);
            state.logs.push(EpochLog {
                fold: opts.fold + 1,
                phase: p + 1,
                epoch: e + 1,
                lr,
                train_loss,
                val_loss,
                val_auc: metrics.auc,
                val_sensitivity: metrics.at.sensitivity,
                val_specificity: metrics.at.specificity,
                val_accuracy: metrics.at.accuracy,
            });
            let score = metrics.auc.unwrap_or(f64::NEG_INFINITY);
            if state.best.as_ref().is_none_or(|b| score > b.auc) {
                state.best = Some(Best { auc: score, params: state.model.params.clone() });
            }
            state.epoch += 1;
            on_epoch(&state)?;
        }
        finish_phase(&mut state, data, cfg)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Descriptor standardization from un-augmented training images: the
/// primary path before phase 1, both paths before phase 2.
fn calibrate(model: &mut CiffModel, data: &FoldData<'_>, phase: usize) -> Result<()> {
    let norms: &[&str] = if phase == 0 { &[model::PRIMARY_NORM] } else { &[model::PRIMARY_NORM, model::CONTEXT_NORM] };
    for norm in norms {
        model.calibrate(norm, data.images, data.train).context(|| format!("calibrating {norm}"))?;
    }
    Ok(())
}

fn finish_phase(state: &mut TrainState, data: &FoldData<'_>, cfg: &TrainConfig) -> Result<()> {
    // Phases 2 and 3 train the same full model, so the best checkpoint of
    // phase 2 stays a candidate through phase 3.
    let best = if state.phase == 1 { state.best.clone() } else { state.best.take() };
    if let Some(best) = best {
        state.model.params = best.params;
    }
    if state.phase == 0 {
        for (from, to) in [
            (model::PRIMARY_BACKBONE, model::CONTEXT_BACKBONE),
            (model::PRIMARY_MKSA, model::CONTEXT_MKSA),
            (model::PRIMARY_NORM, model::CONTEXT_NORM),
        ] {
            state.model.params.copy_prefix(from, to)?;
        }
        let scores = score_single(&state.model, data.records, data.images, data.val, cfg.threshold)?;
        state.baseline = Some(scores.metrics);
    }
    state.phase += 1;
    state.epoch = 0;
    let next = state.phase.min(2);
    state.plateau = Plateau::new(cfg.learning_rates[next]);
    Ok(())
}

fn batches(mut order: Vec<usize>, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn load(images: &dyn ImageSource, i: usize, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let img = images.image(i)?;
    Ok(if aug.enabled { AugmentParams::draw(aug, rng).apply(&img) } else { img })
}

fn apply_grads(
    state: &mut TrainState,
    grads: std::collections::BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = state.plateau.lr;
    adam_step(&mut state.model.params, &grads, &mut state.adam, lr, &cfg.adam)
}

/// Phase 1: primary path and single-image head on primary BCE.
fn single_epoch(state: &mut TrainState, data: &FoldData<'_>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches(data.train.to_vec(), cfg.batch_size, rng) {
        let grads = {
            let tape = Tape::new();
            let trainable = |_: &str| true;
            let b = state.model.params.bind(&tape, &trainable);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = load(data.images, i, &cfg.augment, rng)?;
                let f = state.model.primary_feature(&b, tape.constant(img))?;
                let y = state.model.single(&b, f)?;
                losses.push(y.bce(&Tensor::scalar(data.records[i].target as f64))?);
            }
            let loss = batch_mean(&losses)?;
            total += loss.item() * batch.len() as f64;
            b.grads(&tape.backward(loss)?)
        };
        apply_grads(state, grads, cfg)?;
    }
    Ok(total / data.train.len().max(1) as f64)
}

/// Phases 2 and 3: full model on compound loss.
fn context_epoch(
    state: &mut TrainState,
    data: &FoldData<'_>,
    cfg: &TrainConfig,
    phase: &Phase,
    cache: Option<&FeatureCache>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let m = state.model.config.m;
    let mut plans = build_set_plans(data.records, data.train, m, rng)?;
    if cfg.blackout > 0.0 {
        plans = plans.iter().map(|p| blackout_plan(p, cfg.blackout, rng)).collect::<Result<_>>()?;
    }
    let mut total = 0.0;
    for batch in batches((0..plans.len()).collect(), cfg.batch_size, rng) {
        let grads = {
            let tape = Tape::new();
            let frozen = phase.frozen.clone();
            let trainable = move |n: &str| !in_groups(n, &frozen);
            let model = &state.model;
            let b = model.params.bind(&tape, &trainable);
            let mut black: Option<Var<'_>> = None;
            let mut losses = Vec::with_capacity(batch.len());
            for &k in &batch {
                let plan = &plans[k];
                let (prim, ctx) = match cache {
                    Some(c) => {
                        let prim = tape.constant(c.primary[&plan.primary].clone());
                        let ctx: Vec<_> =
                            plan.contexts.iter().map(|&s| tape.constant(c.context_of(s).clone())).collect();
                        (prim, ctx)
                    }
                    None => {
                        let prim = model
                            .primary_feature(&b, tape.constant(load(data.images, plan.primary, &cfg.augment, rng)?))?;
                        let mut ctx = Vec::with_capacity(m);
                        for slot in &plan.contexts {
                            ctx.push(match slot {
                                Some(j) => model
                                    .context_feature(&b, tape.constant(load(data.images, *j, &cfg.augment, rng)?))?,
                                None => match black {
                                    Some(v) => v,
                                    None => {
                                        let (h, w, c) = model.config.backbone.input_size;
                                        let v = model.context_feature(&b, tape.constant(Tensor::zeros(&[h, w, c])))?;
                                        black = Some(v);
                                        v
                                    }
                                },
                            });
                        }
                        (prim, ctx)
                    }
                };
                let out = model.fuse(&b, prim, &ctx)?;
                let t_ctx: Vec<u8> = plan.contexts.iter().map(|&s| context_label(data.records, s)).collect();
                losses.push(compound_loss_on(
                    out.y_primary,
                    out.y_contexts,
                    data.records[plan.primary].target,
                    &t_ctx,
                    &cfg.loss,
                )?);
            }
            let loss = batch_mean(&losses)?;
            total += loss.item() * batch.len() as f64;
            b.grads(&tape.backward(loss)?)
        };
        apply_grads(state, grads, cfg)?;
    }
    Ok(total / plans.len().max(1) as f64)
}

/// Un-augmented descriptors of every train and validation image.
fn train_cache(model: &CiffModel, data: &FoldData<'_>, val: &[SetPlan]) -> Result<FeatureCache> {
    let mut cache = FeatureCache::default();
    let mut wanted: Vec<usize> = data.train.to_vec();
    wanted.extend(val.iter().flat_map(|p| std::iter::once(p.primary).chain(p.contexts.iter().flatten().copied())));
    wanted.sort_unstable();
    wanted.dedup();
    for i in wanted {
        let img = data.images.image(i)?;
        cache.primary.insert(i, describe(model, Path::Primary, &img)?);
        cache.context.insert(i, describe(model, Path::Context, &img)?);
    }
    cache.black = Some(black_feature(model)?);
    Ok(cache)
}

fn validate(
    model: &CiffModel,
    data: &FoldData<'_>,
    cfg: &TrainConfig,
    phase: &Phase,
    cache: Option<&FeatureCache>,
    val: &[SetPlan],
) -> Result<(f64, Metrics)> {
    if !phase.context_enabled {
        let s = score_single(model, data.records, data.images, data.val, cfg.threshold)?;
        return Ok((s.loss, s.metrics));
    }
    let preds = match cache {
        Some(c) => eval::predict_cached(model, c, val)?,
        None => eval::predict_plans(model, data.images, val)?,
    };
    let s = score_plans(preds, data.records, val, &cfg.loss, cfg.threshold)?;
    Ok((s.loss, s.metrics))
}
