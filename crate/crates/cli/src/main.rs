mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use ciff_core::verify::Scope;
use clap::{Parser, Subcommand};

use crate::config::{LrPreset, RunConfig};

/// Contextual image feature fusion: synthetic data, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "ciff", version)]
struct Cli {
    /// Run seed; for `synth` it seeds the generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Cross-validated training with checkpoints, logs and a metrics report.
    Train {
        /// Dataset directory (overrides the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the context-free baseline only.
        #[arg(long)]
        no_context: bool,
        #[arg(long, value_enum)]
        lr_preset: Option<LrPreset>,
        /// Continue an interrupted run in --out.
        #[arg(long)]
        resume: bool,
        /// Stop every fold after this many epochs; continue with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint, optionally blacking out contexts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate the validation split of this fold (1-based); all records otherwise.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        blackout: f64,
        #[arg(long)]
        threshold: Option<f64>,
        /// Score with the single-image head.
        #[arg(long)]
        no_context: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "op")]
        scope: Scope,
    },
    /// Probability of one primary image given its contexts.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        primary: PathBuf,
        #[arg(long = "context", num_args = 0..)]
        contexts: Vec<PathBuf>,
        #[arg(long)]
        no_context: bool,
    },
}

/// A problem with how the command was invoked; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::read(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> anyhow::Result<PathBuf> {
    cli.out.clone().ok_or_else(|| usage("--out is required"))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Synth { patients } => {
            let mut cfg = load_config(&cli)?;
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            if let Some(n) = patients {
                cfg.synth.n_patients = *n;
            }
            cfg.synth.validate().map_err(|e| usage(e.to_string()))?;
            commands::synth(&cfg, &require_out(&cli)?, cli.force)?;
        }
        Command::Train { data, no_context, lr_preset, resume, stop_after } => {
            let out = require_out(&cli)?;
            let mut cfg = if *resume && cli.config.is_none() {
                RunConfig::read(&out.join(commands::CONFIG_FILE)).map_err(|e| usage(format!("{e:#}")))?
            } else {
                load_config(&cli)?
            };
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            if *no_context {
                cfg.context = false;
            }
            if let Some(p) = lr_preset {
                cfg.train.learning_rates = p.rates();
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let args = commands::TrainArgs { resume: *resume, force: cli.force, stop_after: *stop_after };
            commands::train(cfg, &out, &args)?;
        }
        Command::Eval { checkpoint, data, fold, blackout, threshold, no_context } => {
            let mut cfg = load_config(&cli)?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            if *no_context {
                cfg.context = false;
            }
            let args = commands::EvalArgs {
                checkpoint: checkpoint.clone(),
                fold: *fold,
                blackout: *blackout,
                threshold: *threshold,
            };
            commands::eval(cfg, cli.out.as_deref(), &args)?;
        }
        Command::Gradcheck { scope } => {
            return commands::gradcheck(*scope, cli.seed.unwrap_or(0));
        }
        Command::Predict { checkpoint, primary, contexts, no_context } => {
            let args = commands::PredictArgs {
                checkpoint: checkpoint.clone(),
                primary: primary.clone(),
                contexts: contexts.clone(),
                no_context: *no_context,
            };
            commands::predict(&args)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
