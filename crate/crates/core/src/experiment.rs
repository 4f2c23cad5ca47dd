//! Cross-validated runs and the metrics report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{blackout_plan, kfold_split, Fold, ImageSource, Record};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{mean_std, Metrics, ThresholdMetrics};
use crate::model::{CiffModel, ModelConfig};
use crate::train::eval::{predict_plans, score_plans, score_single};
use crate::train::{derive_rng, run_phases, val_plans, FoldData, RunOptions, TrainConfig, TrainState};

/// Stream id for evaluation-time blackout draws.
const BLACKOUT_STREAM: u64 = u64::MAX - 1;

/// Validation metrics of a trained model on one fold.
///
/// With `opts.context` the full model scores the fold's fixed validation
/// sets, each context blacked out with probability `blackout`. Without it
/// the single-image head scores every validation image.
pub fn fold_metrics(
    model: &CiffModel,
    data: &FoldData<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
    blackout: f64,
) -> Result<Metrics> {
    if !opts.context {
        return Ok(score_single(model, data.records, data.images, data.val, cfg.threshold)?.metrics);
    }
    let mut plans = val_plans(data, model.config.m, opts)?;
    let mut rng = derive_rng(opts.seed, &[BLACKOUT_STREAM, opts.fold as u64]);
    plans = plans.iter().map(|p| blackout_plan(p, blackout, &mut rng)).collect::<Result<_>>()?;
    let preds = predict_plans(model, data.images, &plans)?;
    Ok(score_plans(preds, data.records, &plans, &cfg.loss, cfg.threshold)?.metrics)
}

/// Outcome of training one fold.
pub struct FoldRun {
    /// 0-based.
    pub fold: usize,
    pub state: TrainState,
    /// Metrics of the final model without blackout.
    pub metrics: Metrics,
}

/// Everything that determines a cross-validated training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub seed: u64,
    /// False trains the context-free baseline only.
    pub context: bool,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::Validation(format!("folds must be at least 2, got {}", self.folds)));
        }
        Ok(())
    }

    pub fn options(&self, fold: usize) -> RunOptions {
        RunOptions { seed: self.seed, fold, context: self.context }
    }

    pub fn splits(&self, records: &[Record]) -> Result<Vec<Fold>> {
        kfold_split(records, self.folds, self.seed)
    }

    /// Untrained state of a fold. Every fold starts from the same
    /// initialisation.
    pub fn initial_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(CiffModel::new(self.model.clone(), self.seed)?, &self.train))
    }

    /// Trains (or resumes) one fold and scores the final model.
    pub fn train_fold(
        &self,
        data: &FoldData<'_>,
        fold: usize,
        start: TrainState,
        on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<FoldRun> {
        let opts = self.options(fold);
        let state = run_phases(start, data, &self.train, &opts, on_epoch).context(|| format!("fold {}", fold + 1))?;
        let metrics = fold_metrics(&state.model, data, &self.train, &opts, 0.0)?;
        Ok(FoldRun { fold, state, metrics })
    }

    /// Trains every fold in order.
    pub fn run(&self, records: &[Record], images: &dyn ImageSource) -> Result<Vec<FoldRun>> {
        self.validate()?;
        let splits = self.splits(records)?;
        splits
            .iter()
            .enumerate()
            .map(|(k, split)| {
                let data = FoldData { records, images, train: &split.train, val: &split.val };
                self.train_fold(&data, k, self.initial_state()?, |_| Ok(()))
            })
            .collect()
    }
}

/// Metrics of one fold as written to the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// 1-based.
    pub fold: usize,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub sweep: Vec<ThresholdMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Folds where the metric was defined.
    pub n: usize,
}

/// Per-fold and cross-validated metrics of one model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// "full" or "baseline".
    pub model: String,
    pub threshold: f64,
    pub folds: Vec<FoldReport>,
    /// Mean and population std over folds, keyed by metric name.
    pub cv: BTreeMap<String, MeanStd>,
    /// Phase-1 single-image scores of the same folds, for full runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Box<Report>>,
}

type Column = fn(&FoldReport) -> Option<f64>;

impl Report {
    pub fn new(model: &str, threshold: f64, folds: &[(usize, &Metrics)]) -> Self {
        let folds: Vec<FoldReport> = folds
            .iter()
            .map(|(fold, m)| FoldReport {
                fold: *fold,
                auc: m.auc,
                sensitivity: m.at.sensitivity,
                specificity: m.at.specificity,
                accuracy: m.at.accuracy,
                sweep: m.sweep.clone(),
            })
            .collect();
        let mut cv = BTreeMap::new();
        let columns: [(&str, Column); 4] = [
            ("auc", |f| f.auc),
            ("sensitivity", |f| f.sensitivity),
            ("specificity", |f| f.specificity),
            ("accuracy", |f| Some(f.accuracy)),
        ];
        for (name, get) in columns {
            let values: Vec<f64> = folds.iter().filter_map(get).collect();
            if let Some((mean, std)) = mean_std(&values) {
                cv.insert(name.to_string(), MeanStd { mean, std, n: values.len() });
            }
        }
        Report { model: model.to_string(), threshold, folds, cv, baseline: None }
    }

    /// Report of a finished cross-validation. Full runs carry the phase-1
    /// baseline alongside.
    pub fn from_runs(runs: &[FoldRun], threshold: f64, context: bool) -> Self {
        let main: Vec<(usize, &Metrics)> = runs.iter().map(|r| (r.fold + 1, &r.metrics)).collect();
        if !context {
            return Report::new("baseline", threshold, &main);
        }
        let mut report = Report::new("full", threshold, &main);
        let base: Vec<(usize, &Metrics)> =
            runs.iter().filter_map(|r| r.state.baseline.as_ref().map(|m| (r.fold + 1, m))).collect();
        if !base.is_empty() {
            report.baseline = Some(Box::new(Report::new("baseline", threshold, &base)));
        }
        report
    }

    pub fn mean_auc(&self) -> Option<f64> {
        self.cv.get("auc").map(|s| s.mean)
    }
}
