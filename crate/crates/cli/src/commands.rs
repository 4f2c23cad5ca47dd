use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ciff_core::checkpoint::{self, config_hash};
use ciff_core::data::{load_images, load_manifest, read_png, synth_generate, Fold, InMemory, Record};
use ciff_core::experiment::{fold_metrics, FoldRun, Report};
use ciff_core::model::ImageSet;
use ciff_core::train::{EpochLog, FoldData};
use ciff_core::verify::{self, Scope};
use ciff_core::Tensor;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::Usage;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const STATE_FILE: &str = "state.ckpt";
pub const MODEL_FILE: &str = "best.ckpt";

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold-{}", fold + 1))
}

/// Refuses a non-empty output directory unless `force` is set, in which
/// case the directory is cleared.
fn prepare_out(out: &Path, force: bool) -> anyhow::Result<()> {
    let non_empty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if non_empty {
        if !force {
            return Err(
                Usage(format!("output directory {} is not empty (use --force to overwrite)", out.display())).into()
            );
        }
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn jsonl(logs: &[EpochLog]) -> String {
    logs.iter().map(|l| serde_json::to_string(l).expect("serializable") + "\n").collect()
}

/// Records and images of the configured dataset.
pub fn dataset(cfg: &RunConfig) -> anyhow::Result<(Vec<Record>, InMemory)> {
    match &cfg.data {
        Some(dir) => {
            let records = load_manifest(&dir.join("manifest.csv"), &dir.join("images"))?;
            let images = load_images(&records)?;
            Ok((records, images))
        }
        None => {
            let ds = synth_generate(&cfg.synth)?;
            Ok((ds.records, ds.images))
        }
    }
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    prepare_out(out, force)?;
    let ds = synth_generate(&cfg.synth)?;
    ds.write(out)?;
    println!(
        "wrote {} images of {} patients ({} malignant) to {}",
        ds.records.len(),
        cfg.synth.n_patients,
        ds.malignant_count(),
        out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub resume: bool,
    pub force: bool,
    /// Stop every fold after this many epochs in this invocation, leaving
    /// resumable state behind.
    pub stop_after: Option<usize>,
}

pub fn train(mut cfg: RunConfig, out: &Path, args: &TrainArgs) -> anyhow::Result<()> {
    if args.resume {
        let echoed = RunConfig::read(&out.join(CONFIG_FILE)).context("resuming needs the run's echoed config")?;
        if echoed != cfg {
            bail!(
                "config differs from the one echoed in {}; resume with --config {}",
                out.display(),
                out.join(CONFIG_FILE).display()
            );
        }
        cfg = echoed;
    } else {
        prepare_out(out, args.force)?;
        write_file(&out.join(CONFIG_FILE), cfg.to_json())?;
    }
    let (records, images) = dataset(&cfg)?;
    let exp = cfg.experiment();
    let splits = exp.splits(&records)?;

    let results: Vec<anyhow::Result<Option<FoldRun>>> = splits
        .par_iter()
        .enumerate()
        .map(|(k, split)| {
            let dir = fold_dir(out, k);
            fs::create_dir_all(&dir)?;
            let state_path = dir.join(STATE_FILE);
            let start = if args.resume && state_path.is_file() {
                let loaded = checkpoint::load(&state_path)?;
                loaded.state.with_context(|| format!("{} holds no training state", state_path.display()))?
            } else {
                exp.initial_state()?
            };
            let data = FoldData { records: &records, images: &images, train: &split.train, val: &split.val };
            let first = start.logs.len();
            let mut stopped = false;
            let run = exp.train_fold(&data, k, start, |state| {
                checkpoint::save_state(&state_path, state)?;
                let log = dir.join(LOG_FILE);
                fs::write(&log, jsonl(&state.logs)).map_err(|e| ciff_core::Error::Io { path: log, source: e })?;
                if args.stop_after.is_some_and(|n| state.logs.len() - first >= n) {
                    stopped = true;
                    return Err(ciff_core::Error::Contract("epoch budget reached".into()));
                }
                Ok(())
            });
            match run {
                Ok(run) => {
                    checkpoint::save_model(&dir.join(MODEL_FILE), &run.state.model)?;
                    Ok(Some(run))
                }
                Err(_) if stopped => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect();

    let mut runs = Vec::new();
    for r in results {
        if let Some(run) = r? {
            runs.push(run);
        }
    }
    if runs.len() < splits.len() {
        println!(
            "stopped early; continue with `ciff train --resume --config {} --out {}`",
            out.join(CONFIG_FILE).display(),
            out.display()
        );
        return Ok(());
    }
    let logs: Vec<EpochLog> = runs.iter().flat_map(|r| r.state.logs.iter().cloned()).collect();
    write_file(&out.join(LOG_FILE), jsonl(&logs))?;
    let report = Report::from_runs(&runs, cfg.train.threshold, cfg.context);
    write_file(&out.join(REPORT_FILE), to_json(&report))?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &Report) {
    let line = |r: &Report| {
        let get = |k: &str| r.cv.get(k).map_or("undefined".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        println!("{:<9} auc {}  sens {}  spec {}", r.model, get("auc"), get("sensitivity"), get("specificity"));
    };
    line(report);
    if let Some(b) = &report.baseline {
        line(b);
    }
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub fold: Option<usize>,
    pub blackout: f64,
    pub threshold: Option<f64>,
}

pub fn eval(mut cfg: RunConfig, out: Option<&Path>, args: &EvalArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.blackout) {
        return Err(Usage(format!("--blackout {} is outside [0, 1]", args.blackout)).into());
    }
    if let Some(t) = args.threshold {
        cfg.train.threshold = t;
    }
    let loaded = checkpoint::load(&args.checkpoint)?;
    let expected = config_hash(&cfg.model);
    if loaded.config_hash != expected {
        bail!(
            "checkpoint {} was trained with model config {} but the run config hashes to {}",
            args.checkpoint.display(),
            loaded.config_hash,
            expected
        );
    }
    let (records, images) = dataset(&cfg)?;
    let exp = cfg.experiment();
    let (fold, split) = match args.fold {
        Some(k) => {
            let splits = exp.splits(&records)?;
            let split = splits
                .get(k.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| Usage(format!("--fold {k} is not in 1..={}", splits.len())))?;
            (k - 1, split)
        }
        None => {
            let all: Vec<usize> = (0..records.len()).collect();
            (0, Fold { train: all.clone(), val: all })
        }
    };
    let data = FoldData { records: &records, images: &images, train: &split.train, val: &split.val };
    let metrics = fold_metrics(&loaded.model, &data, &cfg.train, &exp.options(fold), args.blackout)?;
    let json = to_json(&metrics);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_file(&dir.join("eval.json"), &json)?;
        }
        None => std::io::stdout().write_all(json.as_bytes())?,
    }
    Ok(())
}

pub fn gradcheck(scope: Scope, seed: u64) -> anyhow::Result<bool> {
    let results = verify::run(scope, seed)?;
    println!("{:<40} {:>12} {:>6} {:>6}  result", "check", "max rel err", "coords", "draws");
    for r in &results {
        println!(
            "{:<40} {:>12.3e} {:>6} {:>6}  {}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            r.draws,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed (tolerance {:e})", results.len(), failed, verify::TOLERANCE);
    Ok(failed == 0)
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub primary: PathBuf,
    pub contexts: Vec<PathBuf>,
    pub no_context: bool,
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint)?.model;
    let primary = read_png(&args.primary)?;
    let p = if args.no_context {
        model.predict_single(&primary)?
    } else {
        let m = model.config.m;
        if args.contexts.len() > m {
            return Err(Usage(format!("{} contexts given but the model takes {m}", args.contexts.len())).into());
        }
        let mut contexts = args.contexts.iter().map(|p| read_png(p)).collect::<ciff_core::Result<Vec<_>>>()?;
        contexts.resize(m, Tensor::zeros(primary.shape()));
        let set = ImageSet { primary, contexts, y_primary: 0, y_contexts: vec![0; m], patient_id: String::new() };
        model.forward_set(&set)?.0.y_hat_primary
    };
    println!("{p}");
    Ok(())
}
