//! Read-only scoring of trained models.
//!
//! Every distinct image is described once per path and the cached
//! descriptors are fused per set, so scoring n sets costs about two
//! extractor passes per image rather than m+1 per set.

use std::collections::BTreeMap;

use crate::data::sets::context_label;
use crate::data::{ImageSource, Record, SetPlan};
use crate::error::Result;
use crate::metrics::{self, Metrics};
use crate::model::{compound_loss_on, CiffModel, LossConfig, Predictions};
use crate::tensor::{Tape, Tensor};

fn frozen(_: &str) -> bool {
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Primary,
    Context,
}

/// Descriptor of one image along one path.
pub fn describe(model: &CiffModel, path: Path, image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let b = model.params.bind(&tape, &frozen);
    let x = tape.constant(image.clone());
    let f = match path {
        Path::Primary => model.primary_feature(&b, x)?,
        Path::Context => model.context_feature(&b, x)?,
    };
    Ok(f.value())
}

/// Cached descriptors keyed by record index.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    pub primary: BTreeMap<usize, Tensor>,
    pub context: BTreeMap<usize, Tensor>,
    pub black: Option<Tensor>,
}

impl FeatureCache {
    /// Describes every image the plans need, reading each image once.
    pub fn for_plans(model: &CiffModel, images: &dyn ImageSource, plans: &[SetPlan]) -> Result<Self> {
        let mut need: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
        let mut black = false;
        for plan in plans {
            need.entry(plan.primary).or_default().0 = true;
            for slot in &plan.contexts {
                match slot {
                    Some(j) => need.entry(*j).or_default().1 = true,
                    None => black = true,
                }
            }
        }
        let mut cache = FeatureCache::default();
        for (&i, &(as_primary, as_context)) in &need {
            let img = images.image(i)?;
            if as_primary {
                cache.primary.insert(i, describe(model, Path::Primary, &img)?);
            }
            if as_context {
                cache.context.insert(i, describe(model, Path::Context, &img)?);
            }
        }
        if black {
            cache.black = Some(black_feature(model)?);
        }
        Ok(cache)
    }

    pub fn context_of(&self, slot: Option<usize>) -> &Tensor {
        match slot {
            Some(j) => &self.context[&j],
            None => self.black.as_ref().expect("black descriptor cached"),
        }
    }
}

pub fn black_feature(model: &CiffModel) -> Result<Tensor> {
    let (h, w, c) = model.config.backbone.input_size;
    describe(model, Path::Context, &Tensor::zeros(&[h, w, c]))
}

/// Predictions for each plan from cached descriptors.
pub fn predict_cached(model: &CiffModel, cache: &FeatureCache, plans: &[SetPlan]) -> Result<Vec<Predictions>> {
    plans
        .iter()
        .map(|plan| {
            let tape = Tape::new();
            let b = model.params.bind(&tape, &frozen);
            let prim = tape.constant(cache.primary[&plan.primary].clone());
            let ctx: Vec<_> = plan.contexts.iter().map(|&s| tape.constant(cache.context_of(s).clone())).collect();
            Ok(model.fuse(&b, prim, &ctx)?.predictions())
        })
        .collect()
}

pub fn predict_plans(model: &CiffModel, images: &dyn ImageSource, plans: &[SetPlan]) -> Result<Vec<Predictions>> {
    let cache = FeatureCache::for_plans(model, images, plans)?;
    predict_cached(model, &cache, plans)
}

/// Scores and metrics of the full model on `plans`, plus the mean
/// compound loss.
pub struct SetScores {
    pub predictions: Vec<Predictions>,
    pub labels: Vec<u8>,
    pub loss: f64,
    pub metrics: Metrics,
}

pub fn score_plans(
    predictions: Vec<Predictions>,
    records: &[Record],
    plans: &[SetPlan],
    loss: &LossConfig,
    threshold: f64,
) -> Result<SetScores> {
    let labels: Vec<u8> = plans.iter().map(|p| records[p.primary].target).collect();
    let mut total = 0.0;
    for (pred, plan) in predictions.iter().zip(plans) {
        let tape = Tape::new();
        let yp = tape.constant(Tensor::scalar(pred.y_hat_primary));
        let yc = tape.constant(Tensor::vector(pred.y_hat_contexts.clone()));
        let t_ctx: Vec<u8> = plan.contexts.iter().map(|&s| context_label(records, s)).collect();
        total += compound_loss_on(yp, yc, records[plan.primary].target, &t_ctx, loss)?.item();
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.y_hat_primary).collect();
    let metrics = metrics::evaluate(&scores, &labels, threshold)?;
    Ok(SetScores { loss: total / plans.len().max(1) as f64, predictions, labels, metrics })
}

/// Single-head scores of the context-free model.
pub struct ImageScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub loss: f64,
    pub metrics: Metrics,
}

pub fn score_single(
    model: &CiffModel,
    records: &[Record],
    images: &dyn ImageSource,
    subset: &[usize],
    threshold: f64,
) -> Result<ImageScores> {
    let mut scores = Vec::with_capacity(subset.len());
    let mut total = 0.0;
    for &i in subset {
        let p = model.predict_single(&images.image(i)?)?;
        let tape = Tape::new();
        total += tape.constant(Tensor::scalar(p)).bce(&Tensor::scalar(records[i].target as f64))?.item();
        scores.push(p);
    }
    let labels: Vec<u8> = subset.iter().map(|&i| records[i].target).collect();
    let metrics = metrics::evaluate(&scores, &labels, threshold)?;
    Ok(ImageScores { loss: total / subset.len().max(1) as f64, scores, labels, metrics })
}
