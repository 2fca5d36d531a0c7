//! The `fpdn` command-line tool.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fpdn_core::metrics::MetricScale;
use fpdn_core::ops::gradcheck::OpName;

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "fpdn", version, about = "Fingerprint denoising: data generation, training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set train.lr_init=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write degraded/clean PNG pairs and a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        height: usize,
        #[arg(long, default_value_t = 400)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a generated dataset; writes best.ckpt and metrics.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Strictly serial, reproducible run (wall-clock column is zeroed).
        #[arg(long)]
        single_thread: bool,
        /// Shorthand for `--set train.max_epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore an image or every image in a directory.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pad to the next multiple of 16 instead of resizing.
        #[arg(long)]
        pad_instead_of_resize: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare predictions against targets and write a metrics report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Scale of the reported MAE: `unit` (0..1) or `byte` (0..255).
        #[arg(long, default_value = "unit")]
        scale: String,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// One of conv2d, transposed_conv, maxpool, relu, sigmoid, concat, mae.
        #[arg(long, conflicts_with = "full_net")]
        op: Option<String>,
        /// Check a depth-2, base-2 network on an 8x8 input.
        #[arg(long)]
        full_net: bool,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient; every check should then FAIL.
        #[arg(long)]
        corrupt: bool,
    },
}

/// Run a parsed command, printing results; returns the exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::Generate {
            out,
            count,
            height,
            width,
            seed,
            cfg,
        } => {
            let config = resolve_config(cfg.config.as_deref(), &cfg.overrides)?;
            let args = GenerateArgs {
                out,
                count,
                height,
                width,
                seed,
            };
            let manifest = cmd_generate(&args, &config)?;
            println!("{}", manifest.display());
            Ok(EXIT_OK)
        }
        Command::Train {
            data,
            out,
            seed,
            single_thread,
            epochs,
            cfg,
        } => {
            let mut overrides = cfg.overrides;
            if let Some(n) = epochs {
                overrides.push(format!("train.max_epochs={n}"));
            }
            let config = resolve_config(cfg.config.as_deref(), &overrides)?;
            let args = TrainArgs {
                data,
                out,
                seed,
                single_thread,
            };
            let outcome = cmd_train(&args, &config, |line| eprintln!("{line}"))?;
            println!("{}", outcome.checkpoint.display());
            eprintln!(
                "best val_mae {:.5} at epoch {}; log {}",
                outcome.best_val,
                outcome.best_epoch,
                outcome.metrics.display()
            );
            Ok(EXIT_OK)
        }
        Command::Denoise {
            model,
            input,
            out,
            pad_instead_of_resize,
            cfg,
        } => {
            let config = resolve_config(cfg.config.as_deref(), &cfg.overrides)?;
            let mode = if pad_instead_of_resize {
                fpdn_core::pipeline::ResizeMode::Pad
            } else {
                config.resize_mode
            };
            let records = cmd_denoise(&DenoiseArgs { model, input, out }, mode)?;
            for r in &records {
                let (h, w) = r.resize.original;
                let (rh, rw) = r.resize.resized;
                eprintln!("{}: {h}x{w} via {rh}x{rw}", r.input.display());
                println!("{}", r.output.display());
            }
            Ok(EXIT_OK)
        }
        Command::Evaluate {
            pred,
            target,
            report,
            scale,
        } => {
            let scale = MetricScale::parse(&scale)
                .ok_or_else(|| CliError::Usage(format!("--scale must be unit or byte, got {scale:?}")))?;
            let args = EvaluateArgs {
                pred,
                target,
                report,
                scale,
            };
            let rep = cmd_evaluate(&args)?;
            for w in rep.warnings() {
                eprintln!("warning: {w}");
            }
            print!("{rep}");
            if rep.is_complete() {
                Ok(EXIT_OK)
            } else {
                eprintln!("error: report is incomplete (unmatched files)");
                Ok(EXIT_DATA)
            }
        }
        Command::Gradcheck {
            op,
            full_net,
            instances,
            seed,
            corrupt,
        } => {
            let target = match (op, full_net) {
                (_, true) => GradcheckTarget::FullNet,
                (Some(name), false) => GradcheckTarget::Op(OpName::parse(&name).ok_or_else(|| {
                    let known: Vec<&str> = OpName::ALL.iter().map(|o| o.as_str()).collect();
                    CliError::Usage(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
                })?),
                (None, false) => GradcheckTarget::All,
            };
            if instances == 0 {
                return Err(CliError::Usage("--instances must be >= 1".into()));
            }
            let reports = cmd_gradcheck(&GradcheckArgs {
                target,
                instances,
                seed,
                corrupt,
            })?;
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().all(|r| r.passed()) {
                Ok(EXIT_OK)
            } else {
                Ok(EXIT_NUMERIC)
            }
        }
    }
}
