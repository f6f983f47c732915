//! The `features`, `train`, `eval` and `gradcheck` commands.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use glam_core::audio::{normalize_features, FeatureSegment, FeatureStats, MfccConfig};
use glam_core::experiment::{evaluate_segments, run_experiment, segments_to_tensor, RunResult};
use glam_core::gradsuite::{run_gradcheck_suite, SuiteReport};
use glam_core::metrics::{runs_csv, MetricValues, MetricsReport, SplitSummary};
use glam_core::model::{export_embeddings, Checkpoint};
use glam_core::training::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::cache::{cache_dir, extract_features, load_features, FeaturesReport};
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::fsutil::{atomic_write, atomic_write_json};
use crate::manifest::{parse_manifest, Emotion, UtteranceRecord};

fn selected_records(cfg: &RunConfig) -> Result<(PathBuf, Vec<UtteranceRecord>)> {
    let path = cfg.manifest_path()?.to_path_buf();
    let records = cfg.dataset.apply(&parse_manifest(&path)?);
    if records.is_empty() {
        return Err(CliError::Validation(format!(
            "the {} subset of {} is empty",
            cfg.dataset,
            path.display()
        )));
    }
    Ok((path, records))
}

/// Extracts features for every selected record. Any per-file failure makes
/// the command fail after the rest have been processed.
pub fn cmd_features(cfg: &RunConfig) -> Result<FeaturesReport> {
    let (manifest, records) = selected_records(cfg)?;
    extract_features(&records, &cfg.mfcc, &cache_dir(&manifest))
}

/// Everything written by one `train` invocation.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub runs: Vec<MetricValues>,
    pub summary: SplitSummary,
    pub runs_csv: PathBuf,
    pub summary_json: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub fusion: String,
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub alpha: f64,
    pub epochs: usize,
    pub n_runs: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub degenerate: bool,
    pub runs: Vec<MetricValues>,
}

/// Checkpoint metadata needed to re-evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: usize,
    pub fusion: String,
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub mfcc: MfccConfig,
    pub feature_stats: FeatureStats,
    pub best_epoch: Option<usize>,
    pub test_ids: Vec<String>,
    pub test_metrics: MetricValues,
}

fn run_file(out: &Path, run: usize, tag: &str, suffix: &str) -> PathBuf {
    out.join(format!("run{run}_{tag}{suffix}"))
}

fn write_run(cfg: &RunConfig, out: &Path, r: &RunResult) -> Result<PathBuf> {
    let tag = cfg.model.fusion.as_str();
    let meta = RunMetadata {
        run_id: r.run_id,
        fusion: tag.into(),
        dataset: cfg.dataset.as_str().into(),
        split: cfg.split.to_string(),
        seed: cfg.seed,
        labels: Emotion::names().map(String::from).to_vec(),
        mfcc: cfg.mfcc.clone(),
        feature_stats: r.feature_stats.clone(),
        best_epoch: r.best_epoch,
        test_ids: r.test_ids.clone(),
        test_metrics: r.test.report.values(),
    };
    let ckpt = Checkpoint {
        config: cfg.model.clone(),
        params: r.params.clone(),
        step: r.steps,
        metadata: serde_json::to_value(&meta).expect("metadata serializes"),
    };
    let ckpt_path = run_file(out, r.run_id, tag, ".ckpt");
    atomic_write(&ckpt_path, &ckpt.to_bytes()?)?;

    let confusion = r
        .test
        .report
        .confusion
        .clone()
        .with_names(&Emotion::names())?;
    atomic_write_json(&run_file(out, r.run_id, tag, "_confusion.json"), &confusion)?;
    atomic_write(
        &run_file(out, r.run_id, tag, "_confusion.txt"),
        confusion.to_text().as_bytes(),
    )?;
    let mut history = String::new();
    for rec in &r.history {
        history.push_str(&serde_json::to_string(rec).expect("epoch record serializes"));
        history.push('\n');
    }
    atomic_write(
        &run_file(out, r.run_id, tag, "_history.jsonl"),
        history.as_bytes(),
    )?;
    Ok(ckpt_path)
}

/// Trains `cfg.n_runs` splits and writes per-run checkpoints, confusion
/// matrices and histories, then the run table and summary. File names carry
/// the fusion mode so ablations can share an output directory.
pub fn cmd_train(
    cfg: &RunConfig,
    progress: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<TrainOutput> {
    let (manifest, records) = selected_records(cfg)?;
    let utts = load_features(&records, &cfg.mfcc, &cache_dir(&manifest))?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    let mut checkpoints = Vec::new();
    let mut write_err = None;
    let result = run_experiment(
        &utts,
        &cfg.model,
        &cfg.train,
        cfg.split,
        cfg.n_runs,
        progress,
        &mut |r| match write_run(cfg, &out, r) {
            Ok(p) => {
                checkpoints.push(p);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                write_err = Some(e);
                Err(glam_core::Error::State(msg))
            }
        },
    );
    if let Some(e) = write_err {
        return Err(e);
    }
    let exp = result?;

    let tag = cfg.model.fusion.as_str();
    let runs_path = out.join(format!("runs_{tag}.csv"));
    atomic_write(&runs_path, runs_csv(&exp.runs).as_bytes())?;
    let summary_path = out.join(format!("summary_{tag}.json"));
    let file = SummaryFile {
        fusion: tag.into(),
        dataset: cfg.dataset.as_str().into(),
        split: cfg.split.to_string(),
        seed: cfg.seed,
        alpha: cfg.train.alpha,
        epochs: cfg.train.epochs,
        n_runs: exp.summary.n_runs,
        mean: exp.summary.mean,
        std: exp.summary.std,
        degenerate: exp.summary.degenerate,
        runs: exp.runs.clone(),
    };
    atomic_write_json(&summary_path, &file)?;
    Ok(TrainOutput {
        runs: exp.runs,
        summary: exp.summary,
        runs_csv: runs_path,
        summary_json: summary_path,
        checkpoints,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Restrict to the test utterances recorded in the checkpoint.
    pub test_split: bool,
    /// Also write segment embeddings to this GTSR file.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub report: MetricsReport,
    /// Test metrics stored at training time.
    pub recorded: MetricValues,
    pub n_segments: usize,
}

fn read_checkpoint(path: &Path) -> Result<(Checkpoint<f32>, RunMetadata)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes)?;
    let meta: RunMetadata = serde_json::from_value(ckpt.metadata.clone())
        .map_err(|e| CliError::Validation(format!("{} lacks run metadata: {e}", path.display())))?;
    Ok((ckpt, meta))
}

/// Evaluates a checkpoint on the manifest's cached features, normalized with
/// the statistics stored in the checkpoint.
pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalOutput> {
    let (ckpt, meta) = read_checkpoint(&opts.checkpoint)?;
    let manifest = cfg.manifest_path()?.to_path_buf();
    let mut records = parse_manifest(&manifest)?;
    if opts.test_split {
        let ids: HashSet<&str> = meta.test_ids.iter().map(String::as_str).collect();
        records.retain(|r| ids.contains(r.utterance_id.as_str()));
        if records.len() != ids.len() {
            return Err(CliError::Validation(format!(
                "manifest holds {} of the checkpoint's {} test utterances",
                records.len(),
                ids.len()
            )));
        }
    } else {
        records = cfg.dataset.apply(&records);
    }
    let utts = load_features(&records, &meta.mfcc, &cache_dir(&manifest))?;
    let segments: Vec<FeatureSegment> = utts.into_iter().flat_map(|u| u.segments).collect();
    let (segments, _) = normalize_features(&segments, Some(&meta.feature_stats))?;
    let eval = evaluate_segments(&ckpt.params, &ckpt.config, &segments)?;

    if let Some(path) = &opts.embeddings {
        let refs: Vec<&FeatureSegment> = segments.iter().collect();
        let emb = export_embeddings(&ckpt.params, &ckpt.config, &segments_to_tensor(&refs)?)?;
        atomic_write(path, &emb.to_bytes())?;
        let rows: Vec<(String, usize)> = segments
            .iter()
            .map(|s| (s.utterance_id.clone(), s.segment_index))
            .collect();
        atomic_write_json(&path.with_extension("rows.json"), &rows)?;
    }

    let output = EvalOutput {
        checkpoint: opts.checkpoint.clone(),
        report: eval.report,
        recorded: meta.test_metrics,
        n_segments: segments.len(),
    };
    let stem = opts
        .checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    atomic_write_json(&cfg.out.join(format!("eval_{stem}.json")), &output)?;
    Ok(output)
}

/// Runs the gradient-check suite, optionally saving the report as JSON.
pub fn cmd_gradcheck(out: Option<&Path>) -> Result<SuiteReport> {
    let report = run_gradcheck_suite()?;
    save_gradcheck(&report, out)?;
    Ok(report)
}

pub(crate) fn save_gradcheck(report: &SuiteReport, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        atomic_write_json(&dir.join("gradcheck.json"), report)?;
    }
    Ok(())
}

/// Fails when any gradient case exceeded its tolerance.
pub fn check_gradcheck(report: &SuiteReport) -> Result<()> {
    let failed: Vec<String> = report
        .failures()
        .map(|c| {
            format!(
                "{} (max rel err {:.3e} > {:.0e})",
                c.name, c.max_rel_err, c.tolerance
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
