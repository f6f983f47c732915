//! Repeated-split experiments: train on each split, predict per segment,
//! aggregate per utterance and summarize.

use serde::{Deserialize, Serialize};

use crate::audio::{normalize_features, FeatureSegment, FeatureStats};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{
    aggregate_utterance, compute_metrics, make_splits, MetricValues, MetricsReport, SplitMode,
    SplitSummary,
};
use crate::model::{predict_logits, softmax_rows, ModelConfig, ParameterSet};
use crate::tensor::Tensor;
use crate::training::{train_with_progress, EpochRecord, TrainConfig};

/// Stacks segments into an `N×1×frames×coeffs` batch.
pub fn segments_to_tensor(segments: &[&FeatureSegment]) -> Result<Tensor<f32>> {
    let Some(first) = segments.first() else {
        return shape_err("cannot batch zero segments");
    };
    let (f, c) = (first.features.frames, first.features.coeffs);
    let mut data = Vec::with_capacity(segments.len() * f * c);
    for s in segments {
        if (s.features.frames, s.features.coeffs) != (f, c) {
            return shape_err(format!(
                "segment {}#{} is {}x{}, batch is {f}x{c}",
                s.utterance_id, s.segment_index, s.features.frames, s.features.coeffs
            ));
        }
        data.extend_from_slice(&s.features.data);
    }
    Tensor::new(vec![segments.len(), 1, f, c], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtterancePrediction {
    pub utterance_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// In order of first appearance in the segment list.
    pub utterances: Vec<UtterancePrediction>,
}

/// Eval-mode prediction of every segment, averaged per utterance.
pub fn evaluate_segments(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    segments: &[FeatureSegment],
) -> Result<Evaluation> {
    if segments.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let refs: Vec<&FeatureSegment> = segments.iter().collect();
    let probs = softmax_rows(&predict_logits(params, cfg, &segments_to_tensor(&refs)?)?);

    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, (usize, Vec<Vec<f64>>)> = Default::default();
    for (s, p) in segments.iter().zip(probs) {
        let entry = groups.entry(&s.utterance_id).or_insert_with(|| {
            order.push(&s.utterance_id);
            (s.label, Vec::new())
        });
        if entry.0 != s.label {
            return Err(Error::Validation(format!(
                "utterance {} has segments with different labels",
                s.utterance_id
            )));
        }
        entry.1.push(p);
    }
    let mut utterances = Vec::with_capacity(order.len());
    for id in order {
        let (label, ps) = &groups[id];
        let (probs, predicted) = aggregate_utterance(ps)?;
        utterances.push(UtterancePrediction {
            utterance_id: id.to_string(),
            label: *label,
            probs,
            predicted,
        });
    }
    let truth: Vec<usize> = utterances.iter().map(|u| u.label).collect();
    let pred: Vec<usize> = utterances.iter().map(|u| u.predicted).collect();
    Ok(Evaluation {
        report: compute_metrics(&truth, &pred, cfg.n_classes)?,
        utterances,
    })
}

/// All cached segments of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub label: usize,
    pub segments: Vec<FeatureSegment>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: usize,
    pub params: ParameterSet<f32>,
    /// Normalization fitted on this run's training split.
    pub feature_stats: FeatureStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub test: Evaluation,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub runs: Vec<MetricValues>,
    pub summary: SplitSummary,
}

fn gather(utts: &[UtteranceFeatures], idx: &[usize]) -> Vec<FeatureSegment> {
    idx.iter()
        .flat_map(|&i| utts[i].segments.iter().cloned())
        .collect()
}

/// Runs `n_runs` independent splits. Run `i` splits with `cfg.seed + i` and
/// trains with the same seed. `on_run` sees each finished run before the
/// next starts; the first failure aborts with its run index.
pub fn run_experiment(
    utts: &[UtteranceFeatures],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mode: SplitMode,
    n_runs: usize,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
    on_run: &mut dyn FnMut(&RunResult) -> Result<()>,
) -> Result<ExperimentSummary> {
    let splits = make_splits(utts.len(), mode, n_runs, cfg.seed)?;
    let mut runs = Vec::with_capacity(n_runs);
    for (i, split) in splits.iter().enumerate() {
        let mut run = || -> Result<RunResult> {
            let (train_set, stats) = normalize_features(&gather(utts, &split.train), None)?;
            let val_set = match &split.val {
                Some(v) => Some(normalize_features(&gather(utts, v), Some(&stats))?.0),
                None => None,
            };
            let (test_set, _) = normalize_features(&gather(utts, &split.test), Some(&stats))?;
            let run_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let outcome = train_with_progress(
                model_cfg,
                &train_set,
                val_set.as_deref(),
                &run_cfg,
                &mut |rec| on_epoch(i, rec),
            )?;
            let test = evaluate_segments(&outcome.params, model_cfg, &test_set)?;
            Ok(RunResult {
                run_id: i,
                params: outcome.params,
                feature_stats: stats,
                history: outcome.history,
                best_epoch: outcome.best_epoch,
                steps: outcome.steps,
                test,
                test_ids: split
                    .test
                    .iter()
                    .map(|&j| utts[j].utterance_id.clone())
                    .collect(),
            })
        };
        let result = run().and_then(|r| on_run(&r).map(|_| r));
        let result = result.map_err(|e| Error::Run {
            run: i,
            source: Box::new(e),
        })?;
        runs.push(result.test.report.values());
    }
    let summary = SplitSummary::from_runs(&runs)?;
    Ok(ExperimentSummary { runs, summary })
}
