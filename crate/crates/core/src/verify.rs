//! Finite-difference gradient suites at three granularities: primitive
//! ops, individual modules, and two small end-to-end models.
//!
//! Inputs are drawn at random. A draw whose relu, max or clamp branches
//! sit closer than [`KINK_MARGIN`] to a switch point, or whose ±eps probes
//! flip a branch, is discarded and redrawn.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{global_attention_pool, BackboneConfig, Stage};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::mksa;
use crate::model::{compound_loss_on, CiffModel, LossConfig, ModelConfig};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{grad_check_report, Padding, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Ten probe steps: a branch this far from its switch point cannot flip
/// under a ±eps probe unless its input moves ten times faster than the
/// probed coordinate, and such flips are caught by fingerprinting anyway.
pub const KINK_MARGIN: f64 = 1e-4;
pub const MAX_DRAWS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Module,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            other => Err(Error::Validation(format!("unknown scope `{other}` (expected op, module or model)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Input draws needed to find a kink-free point.
    pub draws: usize,
    pub passed: bool,
}

type Program = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;
type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

struct Case {
    name: String,
    program: Program,
    sample: Sampler,
}

fn case(
    name: impl Into<String>,
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    program: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
) -> Case {
    Case { name: name.into(), program: Box::new(program), sample: Box::new(sample) }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("positive shape")
}

/// Scalar summary with distinct weights per coordinate so that no
/// gradient entry is trivially symmetric.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos()).collect();
    let w = out.tape().constant(Tensor::new(shape, w)?);
    out.mul(w)?.sum_all()
}

fn kink_margin(c: &Case, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::with_kink_tracking();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    (c.program)(&tape, &vars)?;
    Ok(tape.kink_stats().min_margin)
}

fn run_case(scope: Scope, c: &Case, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    for draw in 1..=MAX_DRAWS {
        let inputs = (c.sample)(rng);
        if kink_margin(c, &inputs)? < KINK_MARGIN {
            continue;
        }
        let report = grad_check_report(|t, v| (c.program)(t, v), &inputs, EPS)?;
        if report.kink_crossings > 0 {
            continue;
        }
        return Ok(CheckResult {
            scope,
            name: c.name.clone(),
            max_rel_error: report.max_rel_error,
            coordinates: report.coordinates,
            draws: draw,
            passed: report.max_rel_error < TOLERANCE,
        });
    }
    Err(Error::Degenerate(format!("{}: no kink-free input in {MAX_DRAWS} draws", c.name)))
}

fn run_cases(scope: Scope, cases: Vec<Case>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.iter().map(|c| run_case(scope, c, &mut rng)).collect()
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Op => run_cases(scope, op_cases(), seed),
        Scope::Module => run_cases(scope, module_cases(), seed),
        Scope::Model => run_cases(scope, model_cases(), seed),
    }
}

fn shapes(list: &'static [&'static [usize]]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| list.iter().map(|s| uniform(rng, s, 1.0)).collect()
}

fn op_cases() -> Vec<Case> {
    vec![
        case("linear", shapes(&[&[3, 4], &[4, 5], &[5]]), |_, v| project(v[0].linear(v[1], v[2])?)),
        case("matmul", shapes(&[&[3, 4], &[4, 2]]), |_, v| project(v[0].matmul(v[1])?)),
        case("add", shapes(&[&[2, 3], &[1, 3]]), |_, v| project(v[0].add(v[1])?)),
        case("sub", shapes(&[&[2, 3], &[2, 3]]), |_, v| project(v[0].sub(v[1])?)),
        case("mul", shapes(&[&[2, 3], &[2, 3]]), |_, v| project(v[0].mul(v[1])?)),
        case("scale", shapes(&[&[2, 2, 2]]), |_, v| project(v[0].scale(-1.7)?)),
        case("relu", shapes(&[&[3, 4]]), |_, v| project(v[0].relu()?)),
        case("sigmoid", shapes(&[&[3, 4]]), |_, v| project(v[0].sigmoid()?)),
        case("softmax", shapes(&[&[3, 4]]), |_, v| project(v[0].softmax(1)?)),
        case("reduce_sum", shapes(&[&[2, 3, 4]]), |_, v| project(v[0].sum(&[0, 2])?)),
        case("reduce_mean", shapes(&[&[2, 3, 4]]), |_, v| project(v[0].mean(&[1])?)),
        case("reduce_max", shapes(&[&[2, 3, 4]]), |_, v| project(v[0].max(&[2])?)),
        case("sum_all", shapes(&[&[2, 3]]), |_, v| v[0].mul(v[0])?.sum_all()),
        case("mean_all", shapes(&[&[2, 3]]), |_, v| v[0].mul(v[0])?.mean_all()),
        case("concat", shapes(&[&[2, 3], &[1, 3]]), |_, v| project(Var::concat(&[v[0], v[1]], 0)?)),
        case("reshape", shapes(&[&[2, 6]]), |_, v| project(v[0].reshape(&[3, 4])?)),
        case("transpose", shapes(&[&[2, 3]]), |_, v| project(v[0].transpose()?)),
        case("narrow", shapes(&[&[4, 3]]), |_, v| project(v[0].narrow(0, 1, 2)?)),
        case("conv2d_same", shapes(&[&[1, 5, 5, 2], &[3, 3, 2, 3]]), |_, v| {
            project(v[0].conv2d(v[1], 1, Padding::Same)?)
        }),
        case("conv2d_stride2", shapes(&[&[1, 6, 6, 2], &[3, 3, 2, 2]]), |_, v| {
            project(v[0].conv2d(v[1], 2, Padding::Same)?)
        }),
        case("conv2d_valid", shapes(&[&[1, 4, 4, 2], &[2, 2, 2, 3]]), |_, v| {
            project(v[0].conv2d(v[1], 2, Padding::Valid)?)
        }),
        case("upsample_nearest", shapes(&[&[2, 2, 3]]), |_, v| project(v[0].upsample_nearest(2)?)),
        case("softmax_pool", shapes(&[&[5], &[5, 3]]), |_, v| project(v[0].softmax_pool(v[1])?)),
        case(
            "bce",
            |rng| vec![uniform(rng, &[4], 2.0)],
            |_, v| v[0].sigmoid()?.bce(&Tensor::vector(vec![1.0, 0.0, 0.0, 1.0])),
        ),
    ]
}

/// Store values replaced by uniform draws so zero-initialized gates and
/// projections carry gradient too.
fn randomized(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Vec<Tensor> {
    store.iter().map(|(_, t)| uniform(rng, t.shape(), scale)).collect()
}

/// Case whose inputs are every parameter of `store` followed by `extra`
/// tensors; the program sees them through a [`Bound`].
fn param_case(
    name: &str,
    store: ParamStore,
    scale: f64,
    extra: &'static [&'static [usize]],
    body: impl for<'t> Fn(&Bound<'_, 't>, &[Var<'t>]) -> Result<Var<'t>> + 'static,
) -> Case {
    let names: Vec<String> = store.names().cloned().collect();
    let n = names.len();
    case(
        name,
        move |rng| {
            let mut v = randomized(&store, rng, scale);
            v.extend(extra.iter().map(|s| uniform(rng, s, 1.0)));
            v
        },
        move |tape, vars| {
            let bound = Bound::from_vars(tape, &names, &vars[..n]);
            body(&bound, &vars[n..])
        },
    )
}

fn module_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = Init { rng: &mut rng };
    let backbone = BackboneConfig {
        stages: vec![Stage { channels: 3, downsample: true }, Stage { channels: 4, downsample: false }],
        input_size: (8, 8, 2),
    };
    let mut bb = ParamStore::new();
    backbone.init_params(&mut bb, "bb", &mut init);
    let mut sa = ParamStore::new();
    mksa::init_params(&mut sa, "m", 4, &mut init);
    let fc = FusionConfig { dim: 4, reduction: 2, bff_depth: 2 };
    let mut cff = ParamStore::new();
    fc.init_cff(&mut cff, "f", &mut init);
    let mut bff = ParamStore::new();
    fc.init_bff(&mut bff, "b", &mut init);
    let mut ccff = ParamStore::new();
    fc.init_bff(&mut ccff, "c.bff", &mut init);
    fc.init_cff(&mut ccff, "c.cff", &mut init);

    let sa1 = sa.clone();
    let sa2 = sa.clone();
    let fc2 = fc.clone();
    let fc3 = fc.clone();
    vec![
        param_case("backbone.extract", bb, 0.5, &[&[8, 8, 2]], move |b, x| project(backbone.extract(b, "bb", x[0])?)),
        case("backbone.global_attention_pool", shapes(&[&[4, 4, 3], &[3, 1]]), |_, v| {
            project(global_attention_pool(v[0], v[1])?)
        }),
        param_case("mksa.sa_kernel_k2", sa1, 0.5, &[&[4, 4, 4]], |b, x| project(mksa::sa_kernel(b, "m", x[0], 2)?)),
        param_case("mksa.sa_kernel_k4_padded", sa2, 0.5, &[&[5, 6, 4]], |b, x| {
            project(mksa::sa_kernel(b, "m", x[0], 4)?)
        }),
        param_case("mksa.forward", sa, 0.5, &[&[5, 4, 4]], |b, x| project(mksa::mksa_forward(b, "m", x[0])?)),
        param_case("fusion.cff", cff, 0.8, &[&[3, 4]], |b, x| project(fusion::cff_rows(b, "f", x[0], 4)?)),
        param_case("fusion.bff", bff, 0.8, &[&[2, 4], &[2, 4]], move |b, x| {
            project(fusion::bff_rows(b, "b", x[0], x[1], &fc2)?)
        }),
        param_case("fusion.ccff", ccff, 0.8, &[&[4], &[3, 4]], move |b, x| {
            project(fusion::ccff_rows(b, "c", x[0], x[1], &fc3)?)
        }),
    ]
}

/// The tiny end-to-end configuration: 8×8 inputs, C=4, m=2.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stages: vec![Stage { channels: 4, downsample: true }], input_size: (8, 8, 3) },
        fa_reduction: 2,
        bff_depth: 2,
        m: 2,
    }
}

/// The larger end-to-end configuration: 16×16 inputs, C=8, m=2.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stages: vec![Stage { channels: 4, downsample: true }, Stage { channels: 8, downsample: true }],
            input_size: (16, 16, 3),
        },
        fa_reduction: 2,
        bff_depth: 2,
        m: 2,
    }
}

fn model_cases() -> Vec<Case> {
    vec![
        model_case("model.forward_set_loss.8x8.c4", tiny_model_config()),
        model_case("model.forward_set_loss.16x16.c8", small_model_config()),
    ]
}

/// Compound loss of one set through the whole model, differentiated with
/// respect to every trainable tensor and all m+1 input images.
fn model_case(name: &'static str, config: ModelConfig) -> Case {
    let (h, w, c) = config.backbone.input_size;
    let m = config.m;
    let model = CiffModel::new(config, 0).expect("verification config is valid");
    // The standardization tensors are constants of the forward pass.
    let mut store = ParamStore::new();
    for (k, v) in model.params.iter().filter(|(k, _)| !k.contains(".norm.")) {
        store.insert(k.clone(), v.clone());
    }
    let names: Vec<String> = store.names().cloned().collect();
    let n = names.len();
    let loss = LossConfig::default();
    let targets: Vec<u8> = (0..m).map(|j| (j % 2) as u8).collect();
    case(
        name,
        move |rng| {
            let mut v = randomized(&store, rng, 0.5);
            for _ in 0..=m {
                v.push(
                    Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect())
                        .expect("shape"),
                );
            }
            v
        },
        move |tape, vars| {
            let bound = Bound::from_vars(tape, &names, &vars[..n]);
            let primary = model.primary_feature(&bound, vars[n])?;
            let contexts = (1..=m).map(|j| model.context_feature(&bound, vars[n + j])).collect::<Result<Vec<_>>>()?;
            let out = model.fuse(&bound, primary, &contexts)?;
            compound_loss_on(out.y_primary, out.y_contexts, 1, &targets, &loss)
        },
    )
}
