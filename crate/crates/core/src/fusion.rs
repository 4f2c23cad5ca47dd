//! Contextual and comparative feature fusion.
//!
//! Vectors are `[d]` at the API boundary. Internally a group of m vectors
//! is stacked into an `[m, d]` matrix so the shared dense layers run once
//! per group; rows never mix except in the final softmax pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Feature dimension d (the backbone's channel count).
    pub dim: usize,
    /// Feature-attention bottleneck is d / reduction.
    pub reduction: usize,
    /// Number of cascaded binary feature units.
    pub bff_depth: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.reduction == 0 || !self.dim.is_multiple_of(self.reduction) {
            return Err(Error::Validation(format!(
                "feature reduction {} must divide dimension {}",
                self.reduction, self.dim
            )));
        }
        if self.bff_depth == 0 {
            return Err(Error::Validation("bff depth must be at least 1".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.dim / self.reduction
    }

    /// Feature-attention gate plus score vector.
    pub fn init_cff(&self, store: &mut ParamStore, prefix: &str, init: &mut Init<'_>) {
        let (d, r) = (self.dim, self.hidden());
        store.insert(format!("{prefix}.fa.w1"), init.he(&[d, r], d));
        store.insert(format!("{prefix}.fa.b1"), init.normal(&[r], 0.0));
        store.insert(format!("{prefix}.fa.w2"), init.glorot(&[r, d], r, d));
        store.insert(format!("{prefix}.fa.b2"), init.normal(&[d], 0.0));
        store.insert(format!("{prefix}.score"), init.glorot(&[d, 1], d, 1));
    }

    pub fn init_bff(&self, store: &mut ParamStore, prefix: &str, init: &mut Init<'_>) {
        let d = self.dim;
        for unit in 0..self.bff_depth {
            for role in ["c", "u", "v"] {
                store.insert(format!("{prefix}.bfu{unit}.w{role}"), init.he(&[2 * d, d], 2 * d));
                store.insert(format!("{prefix}.bfu{unit}.b{role}"), init.normal(&[d], 0.0));
            }
        }
    }
}

fn dense<'t>(params: &Bound<'_, 't>, x: Var<'t>, w: &str, b: &str) -> Result<Var<'t>> {
    x.linear(params.get(w)?, params.get(b)?)
}

/// Stacks `[d]` vectors into an `[m, d]` matrix.
pub fn stack<'t>(vectors: &[Var<'t>]) -> Result<Var<'t>> {
    let first = vectors.first().ok_or_else(|| Error::Validation("cannot fuse an empty list of vectors".into()))?;
    let d = first.shape();
    if d.len() != 1 {
        return Err(Error::Validation(format!("feature vectors must be 1-D, got {d:?}")));
    }
    let rows = vectors.iter().map(|v| v.reshape(&[1, v.shape().iter().product()])).collect::<Result<Vec<_>>>()?;
    Var::concat(&rows, 0)
}

fn check_width(op: &str, x: &Var<'_>, dim: usize) -> Result<()> {
    let s = x.shape();
    if s.last() != Some(&dim) {
        return Err(Error::Validation(format!("{op}: feature shape {s:?} does not have width {dim}")));
    }
    Ok(())
}

/// Feature attention on each row of an `[m, d]` matrix:
/// `sigmoid(W2 relu(W1 v + b1) + b2) ⊙ v`.
pub fn feature_attention_rows<'t>(params: &Bound<'_, 't>, prefix: &str, rows: Var<'t>, dim: usize) -> Result<Var<'t>> {
    check_width("feature_attention", &rows, dim)?;
    let hidden = dense(params, rows, &format!("{prefix}.fa.w1"), &format!("{prefix}.fa.b1"))?.relu()?;
    let gate = dense(params, hidden, &format!("{prefix}.fa.w2"), &format!("{prefix}.fa.b2"))?.sigmoid()?;
    gate.mul(rows)
}

pub fn feature_attention<'t>(params: &Bound<'_, 't>, prefix: &str, v: Var<'t>, dim: usize) -> Result<Var<'t>> {
    let out = feature_attention_rows(params, prefix, stack(&[v])?, dim)?;
    out.reshape(&[dim])
}

/// Gated rows and their per-row scores, the pieces pooled by [`cff_rows`].
pub struct CffParts<'t> {
    pub gated: Var<'t>,
    pub scores: Var<'t>,
}

pub fn cff_parts<'t>(params: &Bound<'_, 't>, prefix: &str, rows: Var<'t>, dim: usize) -> Result<CffParts<'t>> {
    let gated = feature_attention_rows(params, prefix, rows, dim)?;
    let m = gated.shape()[0];
    let scores = gated.matmul(params.get(&format!("{prefix}.score"))?)?.reshape(&[m])?;
    Ok(CffParts { gated, scores })
}

/// Fuses the rows of an `[m, d]` matrix into one `[d]` vector: each row is
/// gated by feature attention, scored by a shared vector, and the gated
/// rows are averaged under the softmax of the scores.
pub fn cff_rows<'t>(params: &Bound<'_, 't>, prefix: &str, rows: Var<'t>, dim: usize) -> Result<Var<'t>> {
    let parts = cff_parts(params, prefix, rows, dim)?;
    parts.scores.softmax_pool(parts.gated)
}

pub fn cff<'t>(params: &Bound<'_, 't>, prefix: &str, vectors: &[Var<'t>], dim: usize) -> Result<Var<'t>> {
    cff_rows(params, prefix, stack(vectors)?, dim)
}

/// Softmax weights that [`cff`] assigns to each input vector.
pub fn cff_weights<'t>(params: &Bound<'_, 't>, prefix: &str, vectors: &[Var<'t>], dim: usize) -> Result<Vec<f64>> {
    let parts = cff_parts(params, prefix, stack(vectors)?, dim)?;
    Ok(crate::tensor::softmax_weights(parts.scores.value().data()))
}

/// One binary feature unit applied row-wise: returns (c, u', v').
pub fn bfu<'t>(params: &Bound<'_, 't>, prefix: &str, u: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    if u.shape() != v.shape() {
        return Err(Error::Validation(format!("bfu inputs differ in shape: {:?} vs {:?}", u.shape(), v.shape())));
    }
    let unit = |role: &str, a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
        let joined = Var::concat(&[a, b], 1)?;
        dense(params, joined, &format!("{prefix}.w{role}"), &format!("{prefix}.b{role}"))?.relu()
    };
    let c = unit("c", u, v)?;
    let u2 = unit("u", c, u)?;
    let v2 = unit("v", c, v)?;
    Ok((c, u2, v2))
}

/// Cascade of `depth` units on `[n, d]` row pairs; returns the last
/// comparative rows. The first argument is the primary slot.
pub fn bff_rows<'t>(
    params: &Bound<'_, 't>,
    prefix: &str,
    u: Var<'t>,
    v: Var<'t>,
    cfg: &FusionConfig,
) -> Result<Var<'t>> {
    check_width("bff", &u, cfg.dim)?;
    let (mut u, mut v) = (u, v);
    let mut c = None;
    for unit in 0..cfg.bff_depth {
        let (c_next, u_next, v_next) = bfu(params, &format!("{prefix}.bfu{unit}"), u, v)?;
        c = Some(c_next);
        u = u_next;
        v = v_next;
    }
    c.ok_or_else(|| Error::Validation("bff depth must be at least 1".into()))
}

pub fn bff<'t>(params: &Bound<'_, 't>, prefix: &str, u: Var<'t>, v: Var<'t>, cfg: &FusionConfig) -> Result<Var<'t>> {
    let out = bff_rows(params, prefix, stack(&[u])?, stack(&[v])?, cfg)?;
    out.reshape(&[cfg.dim])
}

/// Comparative contextual fusion: BFF of the primary against each context
/// (shared weights), then CFF over the comparative vectors.
pub fn ccff_rows<'t>(
    params: &Bound<'_, 't>,
    prefix: &str,
    primary: Var<'t>,
    contexts: Var<'t>,
    cfg: &FusionConfig,
) -> Result<Var<'t>> {
    let m = contexts.shape()[0];
    let prim = primary.reshape(&[1, cfg.dim])?;
    let repeated = Var::concat(&vec![prim; m], 0)?;
    let comparative = bff_rows(params, &format!("{prefix}.bff"), repeated, contexts, cfg)?;
    cff_rows(params, &format!("{prefix}.cff"), comparative, cfg.dim)
}

pub fn ccff<'t>(
    params: &Bound<'_, 't>,
    prefix: &str,
    primary: Var<'t>,
    contexts: &[Var<'t>],
    cfg: &FusionConfig,
) -> Result<Var<'t>> {
    ccff_rows(params, prefix, primary, stack(contexts)?, cfg)
}
