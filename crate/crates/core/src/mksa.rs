//! Multi-kernel self attention over a backbone feature map.
//!
//! Three self-attention branches look at the map through k×k area tiles
//! (k = 1, 2, 4). Each branch embeds areas with stride-k convolutions into
//! query/key/value vectors of width C/2, attends over areas, projects back
//! to C channels, upsamples and adds the result to its input. The branch
//! outputs are average pooled, concatenated, fused by a dense layer and
//! added, scaled by a learned gate, to an attention-pooled view of the map.

use crate::backbone::global_attention_pool;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Padding, Var};

pub const KERNEL_SIZES: [usize; 3] = [1, 2, 4];

/// Width of the query/key/value embeddings for a C-channel map.
pub fn inner_channels(channels: usize) -> usize {
    (channels / 2).max(1)
}

pub fn init_params(store: &mut ParamStore, prefix: &str, channels: usize, init: &mut Init<'_>) {
    let c = channels;
    let ci = inner_channels(c);
    for k in KERNEL_SIZES {
        for role in ["theta", "phi", "g"] {
            store.insert(format!("{prefix}.sa{k}.{role}"), init.he(&[k, k, c, ci], k * k * c));
        }
        store.insert(format!("{prefix}.sa{k}.out.w"), init.normal(&[ci, c], 0.0));
        store.insert(format!("{prefix}.sa{k}.out.b"), init.normal(&[c], 0.0));
    }
    store.insert(format!("{prefix}.fuse.w"), init.glorot(&[3 * c, c], 3 * c, c));
    store.insert(format!("{prefix}.fuse.b"), init.normal(&[c], 0.0));
    store.insert(format!("{prefix}.alpha"), init.normal(&[1], 0.0));
    store.insert(format!("{prefix}.attn_pool.w"), init.normal(&[c, 1], 0.0));
}

/// Output of one SA branch together with its area affinity matrix.
pub struct SaOutput<'t> {
    pub out: Var<'t>,
    pub affinity: Var<'t>,
}

/// Self attention over k×k areas of an `[H,W,C]` map, added residually.
pub fn sa_kernel<'t>(params: &Bound<'_, 't>, prefix: &str, fmap: Var<'t>, k: usize) -> Result<Var<'t>> {
    Ok(sa_kernel_full(params, prefix, fmap, k)?.out)
}

pub fn sa_kernel_full<'t>(params: &Bound<'_, 't>, prefix: &str, fmap: Var<'t>, k: usize) -> Result<SaOutput<'t>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::dim("sa_kernel", format!("expects [H,W,C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if k == 0 {
        return Err(Error::Validation("sa_kernel size must be positive".into()));
    }
    let (hp, wp) = (h.div_ceil(k) * k, w.div_ceil(k) * k);
    if k > hp || k > wp {
        return Err(Error::Validation(format!("kernel {k} exceeds padded map {hp}x{wp}")));
    }
    let (ha, wa) = (hp / k, wp / k);
    let areas = ha * wa;
    let padding = Padding::Explicit { top: 0, bottom: hp - h, left: 0, right: wp - w };
    let x = fmap.reshape(&[1, h, w, c])?;
    let embed = |role: &str| -> Result<Var<'t>> {
        let kern = params.get(&format!("{prefix}.sa{k}.{role}"))?;
        let e = x.conv2d(kern, k, padding)?;
        let ci = e.shape()[3];
        e.reshape(&[areas, ci])
    };
    let (theta, phi, g) = (embed("theta")?, embed("phi")?, embed("g")?);
    let affinity = theta.matmul(phi.transpose()?)?.softmax(1)?;
    let attended = affinity.matmul(g)?;
    let proj = attended
        .linear(params.get(&format!("{prefix}.sa{k}.out.w"))?, params.get(&format!("{prefix}.sa{k}.out.b"))?)?;
    let mut up = proj.reshape(&[ha, wa, c])?.upsample_nearest(k)?;
    if hp != h {
        up = up.narrow(0, 0, h)?;
    }
    if wp != w {
        up = up.narrow(1, 0, w)?;
    }
    Ok(SaOutput { out: fmap.add(up)?, affinity })
}

/// Pools an `[H,W,C]` map into a `[C]` descriptor.
pub fn mksa_forward<'t>(params: &Bound<'_, 't>, prefix: &str, fmap: Var<'t>) -> Result<Var<'t>> {
    let s = fmap.shape();
    if s.len() != 3 || s[0] < 4 || s[1] < 4 {
        return Err(Error::Validation(format!("mksa needs a map of at least 4x4, got {s:?}")));
    }
    let c = s[2];
    let pooled = global_attention_pool(fmap, params.get(&format!("{prefix}.attn_pool.w"))?)?;
    let mut branches = Vec::with_capacity(KERNEL_SIZES.len());
    for k in KERNEL_SIZES {
        let out = sa_kernel(params, prefix, fmap, k)?;
        branches.push(out.mean(&[0, 1])?.reshape(&[1, c])?);
    }
    let fused = Var::concat(&branches, 1)?
        .linear(params.get(&format!("{prefix}.fuse.w"))?, params.get(&format!("{prefix}.fuse.b"))?)?
        .reshape(&[c])?;
    pooled.add(fused.mul(params.get(&format!("{prefix}.alpha"))?)?)
}
