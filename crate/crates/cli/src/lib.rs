//! Command-line plumbing for GLAM: manifests, the feature cache, synthetic
//! data and the train/eval/gradcheck commands.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod synth;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_features, cmd_gradcheck, cmd_train, EvalOptions, EvalOutput, TrainOutput,
};
pub use config::{RunConfig, SharedArgs};
pub use error::{CliError, Result};
pub use synth::generate_synth_dataset;

#[derive(Debug, Parser)]
#[command(
    name = "glam",
    version,
    about = "Speech emotion recognition with multi-scale, global-aware networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic four-class corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract, segment and cache MFCC features for a manifest.
    Features(SharedArgs),
    /// Train and test over repeated splits.
    Train(SharedArgs),
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only the checkpoint's recorded test utterances.
        #[arg(long)]
        test_split: bool,
        /// Write segment embeddings to this file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[cfg(feature = "fault-injection")]
        #[arg(long, hide = true)]
        inject_conv_sign_fault: bool,
    },
}

fn metrics_line(name: &str, v: &glam_core::metrics::MetricValues) -> String {
    format!(
        "{name}: WA {:.4}  UA {:.4}  macro-F1 {:.4}  micro-F1 {:.4}",
        v.wa, v.ua, v.macro_f1, v.micro_f1
    )
}

/// Runs one command, printing results to `out` and progress to stderr.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut say = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::Synth {
            out: dir,
            per_class,
            seed,
        } => {
            let path = generate_synth_dataset(&dir, per_class, seed)?;
            say(format!(
                "wrote {} utterances, manifest {}",
                4 * per_class,
                path.display()
            ));
        }
        Command::Features(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let report = cmd_features(&cfg)?;
            say(report.to_text().trim_end().to_string());
            if !report.failures.is_empty() {
                return Err(CliError::Extraction {
                    failed: report.failures.len(),
                    total: report.failures.len() + report.extracted + report.reused,
                });
            }
        }
        Command::Train(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let epochs = cfg.train.epochs;
            let result = cmd_train(&cfg, &mut |run, rec| {
                eprintln!(
                    "run {run} epoch {}/{epochs} loss {:.4} lr {:.3e}{}",
                    rec.epoch + 1,
                    rec.loss,
                    rec.lr,
                    match (rec.val_wa, rec.val_ua) {
                        (Some(wa), Some(ua)) => format!(" val WA {wa:.4} UA {ua:.4}"),
                        _ => String::new(),
                    }
                );
            })?;
            for (i, r) in result.runs.iter().enumerate() {
                say(metrics_line(&format!("run {i}"), r));
            }
            say(metrics_line("mean", &result.summary.mean));
            say(metrics_line("std", &result.summary.std));
            say(format!("summary {}", result.summary_json.display()));
        }
        Command::Eval {
            shared,
            checkpoint,
            test_split,
            embeddings,
        } => {
            let cfg = RunConfig::resolve(&shared)?;
            let opts = EvalOptions {
                checkpoint,
                test_split,
                embeddings,
            };
            let res = cmd_eval(&cfg, &opts)?;
            say(metrics_line("eval", &res.report.values()));
            say(res
                .report
                .confusion
                .clone()
                .with_names(&manifest::Emotion::names())?
                .to_text());
        }
        #[cfg(not(feature = "fault-injection"))]
        Command::Gradcheck { out: dir } => {
            let report = cmd_gradcheck(dir.as_deref())?;
            say(report.to_text().trim_end().to_string());
            commands::check_gradcheck(&report)?;
        }
        #[cfg(feature = "fault-injection")]
        Command::Gradcheck {
            out: dir,
            inject_conv_sign_fault,
        } => {
            let report = if inject_conv_sign_fault {
                let r = glam_core::gradsuite::run_gradcheck_suite_with_fault(
                    glam_core::autodiff::BackwardFault::ConvInputSign,
                )?;
                commands::save_gradcheck(&r, dir.as_deref())?;
                r
            } else {
                cmd_gradcheck(dir.as_deref())?
            };
            say(report.to_text().trim_end().to_string());
            commands::check_gradcheck(&report)?;
        }
    }
    Ok(())
}
