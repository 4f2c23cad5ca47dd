//! Small convolutional feature extractor and global attention pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Padding, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stages: Vec<Stage>,
    /// (height, width, channels) of input images.
    pub input_size: (usize, usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: [8, 16, 32].into_iter().map(|channels| Stage { channels, downsample: true }).collect(),
            input_size: (28, 28, 3),
        }
    }
}

impl BackboneConfig {
    /// Channels of the final feature map.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Spatial extent of the final feature map.
    pub fn output_hw(&self) -> (usize, usize) {
        self.stages.iter().fold((self.input_size.0, self.input_size.1), |(h, w), s| {
            if s.downsample {
                (h.div_ceil(2), w.div_ceil(2))
            } else {
                (h, w)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("backbone needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0) || self.input_size.2 == 0 {
            return Err(Error::Validation("backbone channel counts must be positive".into()));
        }
        let (h, w) = self.output_hw();
        if h < 4 || w < 4 {
            return Err(Error::Validation(format!(
                "final feature map {h}x{w} is smaller than 4x4 for input {:?}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, init: &mut Init<'_>) {
        let mut cin = self.input_size.2;
        for (i, stage) in self.stages.iter().enumerate() {
            let c = stage.channels;
            store.insert(format!("{prefix}.stage{i}.conv.w"), init.he(&[3, 3, cin, c], 9 * cin));
            store.insert(format!("{prefix}.stage{i}.conv.b"), init.normal(&[c], 0.0));
            if stage.downsample {
                store.insert(format!("{prefix}.stage{i}.down.w"), init.he(&[3, 3, c, c], 9 * c));
                store.insert(format!("{prefix}.stage{i}.down.b"), init.normal(&[c], 0.0));
            }
            cin = c;
        }
    }

    /// Maps an `[h,w,c]` image to an `[H',W',C]` feature map.
    ///
    /// Each stage is a 3x3 same-padded conv and relu, optionally followed by
    /// a stride-2 3x3 conv and relu.
    pub fn extract<'t>(&self, params: &Bound<'_, 't>, prefix: &str, image: Var<'t>) -> Result<Var<'t>> {
        let (h, w, c) = self.input_size;
        let shape = image.shape();
        if shape != [h, w, c] {
            return Err(Error::Validation(format!(
                "image shape {shape:?} does not match configured input {:?}",
                self.input_size
            )));
        }
        let mut x = image.reshape(&[1, h, w, c])?;
        for (i, stage) in self.stages.iter().enumerate() {
            let conv = |x: Var<'t>, name: &str, stride: usize| -> Result<Var<'t>> {
                let k = params.get(&format!("{prefix}.stage{i}.{name}.w"))?;
                let b = params.get(&format!("{prefix}.stage{i}.{name}.b"))?;
                x.conv2d(k, stride, Padding::Same)?.add(b)?.relu()
            };
            x = conv(x, "conv", 1)?;
            if stage.downsample {
                x = conv(x, "down", 2)?;
            }
        }
        let s = x.shape();
        x.reshape(&s[1..])
    }
}

/// Softmax-weighted spatial pooling of `[H,W,C]` under scores from a
/// learned `[C,1]` projection.
pub fn global_attention_pool<'t>(fmap: Var<'t>, projection: Var<'t>) -> Result<Var<'t>> {
    let flat = flatten_positions(fmap)?;
    let scores = flat.matmul(projection)?;
    let n = scores.shape()[0];
    scores.reshape(&[n])?.softmax_pool(flat)
}

/// Attention weights of [`global_attention_pool`], one per position.
pub fn attention_pool_weights(fmap: Var<'_>, projection: Var<'_>) -> Result<Vec<f64>> {
    let scores = flatten_positions(fmap)?.matmul(projection)?.value();
    Ok(crate::tensor::softmax_weights(scores.data()))
}

fn flatten_positions(fmap: Var<'_>) -> Result<Var<'_>> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::dim("global_attention_pool", format!("expects [H,W,C], got {s:?}")));
    }
    fmap.reshape(&[s[0] * s[1], s[2]])
}
