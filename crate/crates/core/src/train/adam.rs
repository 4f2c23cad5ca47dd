use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Per-parameter Adam state. A parameter gets an entry on its first
/// update and keeps its own step count, so state carries across phases
/// in which different parameter groups are trained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Parameters absent from `grads` are not touched, nor are their moments.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate {lr} must be positive")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("`{name}`: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        mo.step += 1;
        let t = mo.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
