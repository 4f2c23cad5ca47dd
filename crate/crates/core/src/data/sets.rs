//! Patient-grouped image sets and contextual blackout.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ImageSource, Record};
use crate::error::{Error, Result};
use crate::model::ImageSet;
use crate::tensor::Tensor;

/// A set by record index. `None` contexts are black images labelled 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetPlan {
    pub primary: usize,
    pub contexts: Vec<Option<usize>>,
}

/// One plan per record in `subset`, each image taking the primary slot
/// once. Contexts are `m` distinct other images of the same patient drawn
/// without replacement, padded with black images when the patient has
/// fewer than `m` others.
pub fn build_set_plans(records: &[Record], subset: &[usize], m: usize, rng: &mut impl Rng) -> Result<Vec<SetPlan>> {
    if m == 0 {
        return Err(Error::Validation("m must be at least 1".into()));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in subset {
        let r = records.get(i).ok_or_else(|| Error::Validation(format!("record index {i} out of range")))?;
        by_patient.entry(r.patient_id.as_str()).or_default().push(i);
    }
    let mut plans = Vec::with_capacity(subset.len());
    for &primary in subset {
        let others: Vec<usize> =
            by_patient[records[primary].patient_id.as_str()].iter().copied().filter(|&j| j != primary).collect();
        let mut contexts: Vec<Option<usize>> = if others.len() > m {
            others.choose_multiple(rng, m).map(|&j| Some(j)).collect()
        } else {
            others.into_iter().map(Some).collect()
        };
        contexts.resize(m, None);
        plans.push(SetPlan { primary, contexts });
    }
    Ok(plans)
}

/// Label of a context slot.
pub fn context_label(records: &[Record], slot: Option<usize>) -> u8 {
    slot.map_or(0, |j| records[j].target)
}

/// Loads the images of a plan into an [`ImageSet`].
pub fn materialize(plan: &SetPlan, records: &[Record], images: &dyn ImageSource) -> Result<ImageSet> {
    let primary = images.image(plan.primary)?;
    let black = Tensor::zeros(primary.shape());
    let contexts = plan
        .contexts
        .iter()
        .map(|slot| slot.map_or_else(|| Ok(black.clone()), |j| images.image(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageSet {
        primary,
        contexts,
        y_primary: records[plan.primary].target,
        y_contexts: plan.contexts.iter().map(|&s| context_label(records, s)).collect(),
        patient_id: records[plan.primary].patient_id.clone(),
    })
}

pub fn build_sets(records: &[Record], images: &dyn ImageSource, m: usize, rng: &mut impl Rng) -> Result<Vec<ImageSet>> {
    let all: Vec<usize> = (0..records.len()).collect();
    build_set_plans(records, &all, m, rng)?.iter().map(|p| materialize(p, records, images)).collect()
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("blackout probability {p} is outside [0, 1]")));
    }
    Ok(())
}

/// Independently replaces each context, with probability `p`, by a black
/// image labelled 0. One uniform draw is consumed per context.
pub fn blackout(set: &ImageSet, p: f64, rng: &mut impl Rng) -> Result<ImageSet> {
    check_p(p)?;
    let mut out = set.clone();
    for (img, y) in out.contexts.iter_mut().zip(out.y_contexts.iter_mut()) {
        if rng.gen::<f64>() < p {
            *img = Tensor::zeros(img.shape());
            *y = 0;
        }
    }
    Ok(out)
}

/// [`blackout`] on a plan; draws match the set version one for one.
pub fn blackout_plan(plan: &SetPlan, p: f64, rng: &mut impl Rng) -> Result<SetPlan> {
    check_p(p)?;
    let mut out = plan.clone();
    for slot in out.contexts.iter_mut() {
        if rng.gen::<f64>() < p {
            *slot = None;
        }
    }
    Ok(out)
}
