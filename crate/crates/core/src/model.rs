//! The full network: two extractor + MKSA paths, CFF, CCFF and the heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::ImageSource;
use crate::error::{Error, Result, ResultExt};
use crate::fusion::{self, FusionConfig};
use crate::mksa;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PRIMARY_BACKBONE: &str = "primary.backbone";
pub const PRIMARY_MKSA: &str = "primary.mksa";
pub const CONTEXT_BACKBONE: &str = "context.backbone";
pub const CONTEXT_MKSA: &str = "context.mksa";
pub const CFF: &str = "cff";
pub const CCFF: &str = "ccff";
pub const HEAD_PRIMARY: &str = "head.primary";
pub const HEAD_CONTEXT: &str = "head.context";
/// Single-image head used while the extractor is trained alone.
pub const HEAD_SINGLE: &str = "head.single";

/// Fixed per-path descriptor standardization. These tensors live in the
/// parameter store so they are saved with the model, but the forward pass
/// always reads them as constants and no optimizer ever updates them.
pub const PRIMARY_NORM: &str = "primary.norm";
pub const CONTEXT_NORM: &str = "context.norm";

/// Both extractor paths including their MKSA modules.
pub const EXTRACTOR_GROUPS: [&str; 4] = [PRIMARY_BACKBONE, PRIMARY_MKSA, CONTEXT_BACKBONE, CONTEXT_MKSA];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fa_reduction: usize,
    pub bff_depth: usize,
    /// Contextual images per set.
    pub m: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), fa_reduction: 2, bff_depth: 2, m: 10 }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.feature_channels()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { dim: self.channels(), reduction: self.fa_reduction, bff_depth: self.bff_depth }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion().validate()?;
        if self.m == 0 {
            return Err(Error::Validation("m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_loss: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha_loss: 0.8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_loss) {
            return Err(Error::Validation(format!("alpha_loss {} is outside [0, 1]", self.alpha_loss)));
        }
        Ok(())
    }
}

/// One primary image with its m contextual images, all `[h,w,c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub primary: Tensor,
    pub contexts: Vec<Tensor>,
    pub y_primary: u8,
    pub y_contexts: Vec<u8>,
    pub patient_id: String,
}

impl ImageSet {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() || self.contexts.len() != self.y_contexts.len() {
            return Err(Error::Validation(format!(
                "set for patient {} has {} contexts and {} context labels",
                self.patient_id,
                self.contexts.len(),
                self.y_contexts.len()
            )));
        }
        check_labels(self.y_primary, &self.y_contexts)
    }
}

fn check_labels(y_primary: u8, y_contexts: &[u8]) -> Result<()> {
    if let Some(bad) = std::iter::once(&y_primary).chain(y_contexts).find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub y_hat_primary: f64,
    pub y_hat_contexts: Vec<f64>,
}

/// Primary, contextual and comparative feature vectors of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub primary: Tensor,
    pub contextual: Tensor,
    pub comparative: Tensor,
}

/// Tape-level outputs of the fusion stage.
pub struct SetOutput<'t> {
    /// `[1]` probability for the primary image.
    pub y_primary: Var<'t>,
    /// `[m]` probabilities, one per context.
    pub y_contexts: Var<'t>,
    pub primary: Var<'t>,
    pub contextual: Var<'t>,
    pub comparative: Var<'t>,
}

impl SetOutput<'_> {
    pub fn predictions(&self) -> Predictions {
        Predictions { y_hat_primary: self.y_primary.item(), y_hat_contexts: self.y_contexts.value().into_data() }
    }

    pub fn features(&self) -> FeatureBundle {
        FeatureBundle {
            primary: self.primary.value(),
            contextual: self.contextual.value(),
            comparative: self.comparative.value(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiffModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const NORM_EPS: f64 = 1e-6;

fn all_trainable(_: &str) -> bool {
    true
}

impl CiffModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let c = config.channels();
        config.backbone.init_params(&mut params, PRIMARY_BACKBONE, &mut init);
        mksa::init_params(&mut params, PRIMARY_MKSA, c, &mut init);
        params.insert(format!("{PRIMARY_NORM}.shift"), Tensor::zeros(&[c]));
        params.insert(format!("{PRIMARY_NORM}.scale"), Tensor::full(&[c], 1.0));
        // Both paths start from the same weights, as after phase 1.
        let shared: Vec<(String, Tensor)> = params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("primary.").map(|rest| (format!("context.{rest}"), v.clone())))
            .collect();
        for (name, value) in shared {
            params.insert(name, value);
        }
        let fc = config.fusion();
        fc.init_cff(&mut params, CFF, &mut init);
        fc.init_bff(&mut params, &format!("{CCFF}.bff"), &mut init);
        fc.init_cff(&mut params, &format!("{CCFF}.cff"), &mut init);
        init_head(&mut params, HEAD_PRIMARY, 3 * c, c, &mut init);
        init_head(&mut params, HEAD_CONTEXT, c, c, &mut init);
        init_head(&mut params, HEAD_SINGLE, c, c, &mut init);
        Ok(CiffModel { config, params })
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    fn check_image(&self, image: &Var<'_>) -> Result<()> {
        let (h, w, c) = self.config.backbone.input_size;
        if image.shape() != [h, w, c] {
            return Err(Error::Validation(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                (h, w, c)
            )));
        }
        Ok(())
    }

    fn raw_path<'t>(&self, b: &Bound<'_, 't>, backbone: &str, attention: &str, image: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&image)?;
        let fmap = self.config.backbone.extract(b, backbone, image).context(|| backbone.to_string())?;
        mksa::mksa_forward(b, attention, fmap).context(|| attention.to_string())
    }

    fn standardize<'t>(&self, b: &Bound<'_, 't>, norm: &str, raw: Var<'t>) -> Result<Var<'t>> {
        let tape = b.tape();
        let shift = tape.constant(self.params.get(&format!("{norm}.shift"))?.clone());
        let scale = tape.constant(self.params.get(&format!("{norm}.scale"))?.clone());
        raw.sub(shift)?.mul(scale).context(|| norm.to_string())
    }

    /// `[C]` primary descriptor of one image.
    pub fn primary_feature<'t>(&self, b: &Bound<'_, 't>, image: Var<'t>) -> Result<Var<'t>> {
        let raw = self.raw_path(b, PRIMARY_BACKBONE, PRIMARY_MKSA, image)?;
        self.standardize(b, PRIMARY_NORM, raw)
    }

    /// `[C]` contextual descriptor of one image.
    pub fn context_feature<'t>(&self, b: &Bound<'_, 't>, image: Var<'t>) -> Result<Var<'t>> {
        let raw = self.raw_path(b, CONTEXT_BACKBONE, CONTEXT_MKSA, image)?;
        self.standardize(b, CONTEXT_NORM, raw)
    }

    /// Sets the standardization of one path (`PRIMARY_NORM` or
    /// `CONTEXT_NORM`) to the per-channel mean and inverse standard
    /// deviation of its unstandardized descriptors over `images`.
    pub fn calibrate(&mut self, norm: &str, images: &dyn ImageSource, subset: &[usize]) -> Result<()> {
        let (backbone, attention) = match norm {
            PRIMARY_NORM => (PRIMARY_BACKBONE, PRIMARY_MKSA),
            CONTEXT_NORM => (CONTEXT_BACKBONE, CONTEXT_MKSA),
            other => return Err(Error::Validation(format!("unknown descriptor path `{other}`"))),
        };
        if subset.is_empty() {
            return Err(Error::Validation("cannot calibrate on an empty image set".into()));
        }
        let c = self.channels();
        let mut rows = Vec::with_capacity(subset.len());
        for &i in subset {
            let tape = Tape::new();
            let b = self.params.bind(&tape, &all_trainable);
            let x = tape.constant(images.image(i)?);
            rows.push(self.raw_path(&b, backbone, attention, x)?.value().into_data());
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..c).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..c)
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                1.0 / (var + NORM_EPS).sqrt()
            })
            .collect();
        self.params.insert(format!("{norm}.shift"), Tensor::vector(mean));
        self.params.insert(format!("{norm}.scale"), Tensor::vector(scale));
        Ok(())
    }

    /// Fusion and both heads, from already extracted descriptors.
    pub fn fuse<'t>(&self, b: &Bound<'_, 't>, primary: Var<'t>, contexts: &[Var<'t>]) -> Result<SetOutput<'t>> {
        let c = self.channels();
        let fc = self.config.fusion();
        let rows = fusion::stack(contexts).context(|| CFF.to_string())?;
        let contextual = fusion::cff_rows(b, CFF, rows, c).context(|| CFF.to_string())?;
        let comparative = fusion::ccff_rows(b, CCFF, primary, rows, &fc).context(|| CCFF.to_string())?;
        let joined = Var::concat(&[primary, contextual, comparative], 0)?.reshape(&[1, 3 * c])?;
        let y_primary = head(b, HEAD_PRIMARY, joined).context(|| HEAD_PRIMARY.to_string())?.reshape(&[1])?;
        let m = contexts.len();
        let y_contexts = head(b, HEAD_CONTEXT, rows).context(|| HEAD_CONTEXT.to_string())?.reshape(&[m])?;
        Ok(SetOutput { y_primary, y_contexts, primary, contextual, comparative })
    }

    /// `[1]` probability from the single-image head.
    pub fn single<'t>(&self, b: &Bound<'_, 't>, primary: Var<'t>) -> Result<Var<'t>> {
        let c = self.channels();
        head(b, HEAD_SINGLE, primary.reshape(&[1, c])?).context(|| HEAD_SINGLE.to_string())?.reshape(&[1])
    }

    pub fn forward_set_on<'t>(&self, b: &Bound<'_, 't>, set: &ImageSet) -> Result<SetOutput<'t>> {
        set.validate()?;
        let tape = b.tape();
        let primary = self.primary_feature(b, tape.constant(set.primary.clone()))?;
        let contexts = set
            .contexts
            .iter()
            .map(|img| self.context_feature(b, tape.constant(img.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(b, primary, &contexts)
    }

    pub fn forward_set(&self, set: &ImageSet) -> Result<(Predictions, FeatureBundle)> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, &all_trainable);
        let out = self.forward_set_on(&b, set)?;
        Ok((out.predictions(), out.features()))
    }

    /// Probability of a single image under the context-free head.
    pub fn predict_single(&self, image: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, &all_trainable);
        let f = self.primary_feature(&b, tape.constant(image.clone()))?;
        Ok(self.single(&b, f)?.item())
    }
}

fn init_head(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, init: &mut Init<'_>) {
    store.insert(format!("{prefix}.w1"), init.he(&[input, hidden], input));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.w2"), Tensor::zeros(&[hidden, 1]));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1]));
}

/// `sigmoid(relu(x W1 + b1) W2 + b2)` row-wise, giving `[n, 1]`.
fn head<'t>(b: &Bound<'_, 't>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let p = |n: &str| b.get(&format!("{prefix}.{n}"));
    x.linear(p("w1")?, p("b1")?)?.relu()?.linear(p("w2")?, p("b2")?)?.sigmoid()
}

/// `α·bce(primary) + (1−α)·mean_j bce(context_j)` on the tape.
pub fn compound_loss_on<'t>(
    y_primary: Var<'t>,
    y_contexts: Var<'t>,
    t_primary: u8,
    t_contexts: &[u8],
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    check_labels(t_primary, t_contexts)?;
    if t_contexts.is_empty() {
        return Err(Error::Validation("compound loss needs at least one context".into()));
    }
    let lp = y_primary.bce(&Tensor::scalar(t_primary as f64))?;
    let lc = y_contexts.bce(&Tensor::vector(t_contexts.iter().map(|&t| t as f64).collect()))?;
    lp.scale(cfg.alpha_loss)?.add(lc.scale(1.0 - cfg.alpha_loss)?)
}

/// Compound loss of finished predictions against a set's labels.
pub fn compound_loss(pred: &Predictions, set: &ImageSet, cfg: &LossConfig) -> Result<f64> {
    if pred.y_hat_contexts.len() != set.y_contexts.len() {
        return Err(Error::Validation(format!(
            "{} context predictions for {} context labels",
            pred.y_hat_contexts.len(),
            set.y_contexts.len()
        )));
    }
    let tape = Tape::new();
    let yp = tape.constant(Tensor::scalar(pred.y_hat_primary));
    let yc = tape.constant(Tensor::vector(pred.y_hat_contexts.clone()));
    Ok(compound_loss_on(yp, yc, set.y_primary, &set.y_contexts, cfg)?.item())
}

/// Mean of per-set losses.
pub fn batch_mean<'t>(losses: &[Var<'t>]) -> Result<Var<'t>> {
    if losses.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let rows = losses.iter().map(|l| l.reshape(&[1])).collect::<Result<Vec<_>>>()?;
    Var::concat(&rows, 0)?.mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Stage;
    use crate::tensor::Tape;

    fn tiny(size: usize, m: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stages: vec![Stage { channels: 4, downsample: true }],
                input_size: (size, size, 3),
            },
            fa_reduction: 2,
            bff_depth: 2,
            m,
        }
    }

    /// Model with every tensor, heads included, drawn at random.
    fn random_model(cfg: ModelConfig, seed: u64) -> CiffModel {
        let mut model = CiffModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, t) in model.params.iter_mut() {
            *t = Init { rng: &mut rng }.uniform(t.shape(), -0.5, 0.5);
        }
        model
    }

    fn random_set(size: usize, m: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Init { rng: &mut rng }.uniform(&[size, size, 3], 0.0, 1.0);
        ImageSet {
            primary: img(),
            contexts: (0..m).map(|_| img()).collect(),
            y_primary: 1,
            y_contexts: (0..m).map(|j| (j % 2) as u8).collect(),
            patient_id: "p".into(),
        }
    }

    #[test]
    fn black_inputs_with_fresh_heads_give_one_half() {
        let model = CiffModel::new(tiny(8, 3), 1).unwrap();
        let black = Tensor::zeros(&[8, 8, 3]);
        let set = ImageSet {
            primary: black.clone(),
            contexts: vec![black.clone(); 3],
            y_primary: 0,
            y_contexts: vec![0; 3],
            patient_id: "x".into(),
        };
        let (pred, _) = model.forward_set(&set).unwrap();
        assert_eq!(pred.y_hat_primary, 0.5);
        assert!(pred.y_hat_contexts.iter().all(|&p| p == 0.5));
        assert_eq!(model.predict_single(&black).unwrap(), 0.5);
    }

    #[test]
    fn context_permutation_invariance() {
        let model = random_model(tiny(8, 3), 2);
        let set = random_set(8, 3, 3);
        let (base, _) = model.forward_set(&set).unwrap();
        let order = [2, 0, 1];
        let mut permuted = set.clone();
        permuted.contexts = order.iter().map(|&j| set.contexts[j].clone()).collect();
        permuted.y_contexts = order.iter().map(|&j| set.y_contexts[j]).collect();
        let (pred, _) = model.forward_set(&permuted).unwrap();
        assert!((pred.y_hat_primary - base.y_hat_primary).abs() < 1e-12);
        for (i, &j) in order.iter().enumerate() {
            assert!((pred.y_hat_contexts[i] - base.y_hat_contexts[j]).abs() < 1e-12);
        }
    }

    fn head_oracle(model: &CiffModel, prefix: &str, x: &[f64]) -> f64 {
        let p = |n: &str| model.params.get(&format!("{prefix}.{n}")).unwrap();
        let (w1, b1, w2, b2) = (p("w1"), p("b1"), p("w2"), p("b2"));
        let hidden = w1.shape()[1];
        let mut z = b2.data()[0];
        for j in 0..hidden {
            let h = (b1.data()[j] + (0..x.len()).map(|i| x[i] * w1.get(&[i, j])).sum::<f64>()).max(0.0);
            z += h * w2.get(&[j, 0]);
        }
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn forward_matches_straight_line_composition() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                stages: vec![Stage { channels: 4, downsample: false }, Stage { channels: 4, downsample: true }],
                input_size: (16, 16, 3),
            },
            ..tiny(16, 3)
        };
        let model = random_model(cfg.clone(), 4);
        let set = random_set(16, 3, 5);
        let (pred, feats) = model.forward_set(&set).unwrap();

        let tape = Tape::new();
        let b = model.params.bind(&tape, &all_trainable);
        let describe = |bb: &str, ms: &str, norm: &str, img: &Tensor| {
            let fmap = cfg.backbone.extract(&b, bb, tape.constant(img.clone())).unwrap();
            let raw = mksa::mksa_forward(&b, ms, fmap).unwrap();
            let shift = tape.constant(model.params.get(&format!("{norm}.shift")).unwrap().clone());
            let scale = tape.constant(model.params.get(&format!("{norm}.scale")).unwrap().clone());
            raw.sub(shift).unwrap().mul(scale).unwrap()
        };
        let prim = describe(PRIMARY_BACKBONE, PRIMARY_MKSA, PRIMARY_NORM, &set.primary);
        let ctx: Vec<_> =
            set.contexts.iter().map(|i| describe(CONTEXT_BACKBONE, CONTEXT_MKSA, CONTEXT_NORM, i)).collect();
        let f_ctx = fusion::cff(&b, CFF, &ctx, 4).unwrap().value();
        let f_comp = fusion::ccff(&b, CCFF, prim, &ctx, &cfg.fusion()).unwrap().value();
        let prim = prim.value();
        assert_eq!(feats.primary, prim);
        assert!(feats.contextual.max_abs_diff(&f_ctx) < 1e-12);
        assert!(feats.comparative.max_abs_diff(&f_comp) < 1e-12);

        let joined: Vec<f64> = [prim.data(), f_ctx.data(), f_comp.data()].concat();
        assert!((pred.y_hat_primary - head_oracle(&model, HEAD_PRIMARY, &joined)).abs() < 1e-12);
        for (j, c) in ctx.iter().enumerate() {
            let expect = head_oracle(&model, HEAD_CONTEXT, c.value().data());
            assert!((pred.y_hat_contexts[j] - expect).abs() < 1e-12);
        }
    }

    fn bce(p: f64, t: u8) -> f64 {
        if t == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn compound_loss_identities() {
        let set = random_set(8, 3, 6);
        let pred = Predictions { y_hat_primary: 0.3, y_hat_contexts: vec![0.2, 0.9, 0.6] };
        let lp = bce(0.3, 1);
        let lc = pred.y_hat_contexts.iter().zip(&set.y_contexts).map(|(&p, &t)| bce(p, t)).sum::<f64>() / 3.0;
        let at = |a: f64| compound_loss(&pred, &set, &LossConfig { alpha_loss: a }).unwrap();
        assert_eq!(at(1.0), lp);
        assert_eq!(at(0.0), lc);
        assert!((at(0.5) - (0.5 * lp + 0.5 * lc)).abs() < 1e-15);
        assert!((at(0.8) - (0.8 * lp + 0.2 * lc)).abs() < 1e-15);

        let half = Predictions { y_hat_primary: 0.5, y_hat_contexts: vec![0.5; 3] };
        assert!((compound_loss(&half, &set, &LossConfig::default()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(compound_loss(&half, &set, &LossConfig { alpha_loss: 1.5 }).is_err());
        let mut bad = set.clone();
        bad.y_contexts[0] = 2;
        assert!(matches!(compound_loss(&half, &bad, &LossConfig::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn context_head_gradient_ignores_primary_path() {
        let model = random_model(tiny(8, 2), 7);
        let set = random_set(8, 2, 8);
        let tape = Tape::new();
        let b = model.params.bind(&tape, &all_trainable);
        let out = model.forward_set_on(&b, &set).unwrap();
        let loss = out.y_contexts.bce(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        let grads = b.grads(&tape.backward(loss).unwrap());
        let mut checked = 0;
        for (name, g) in &grads {
            if name.starts_with("primary.") {
                assert!(g.data().iter().all(|&x| x == 0.0), "{name}");
                checked += 1;
            }
        }
        assert!(checked > 0);
        assert!(grads["context.backbone.stage0.conv.w"].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn mismatched_shapes_report_module_path() {
        let model = random_model(tiny(8, 2), 9);
        let mut set = random_set(8, 2, 10);
        set.contexts[1] = Tensor::zeros(&[6, 8, 3]);
        assert!(model.forward_set(&set).is_err());
        let mut cfg = tiny(8, 2);
        cfg.fa_reduction = 3;
        assert!(CiffModel::new(cfg, 0).is_err());
    }

    #[test]
    fn batch_mean_averages() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(2.0));
        assert_eq!(batch_mean(&[a, b]).unwrap().item(), 1.5);
        assert!(batch_mean(&[]).is_err());
    }
}
