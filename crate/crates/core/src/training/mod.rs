//! Mixup, Adam with decoupled weight decay, the exponential learning-rate
//! schedule and the epoch loop.

mod mixup;
mod optim;

pub use mixup::{mixup_batch, mixup_with, sample_beta};
pub use optim::{adam_step, AdamState};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSegment;
use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_segments, segments_to_tensor};
use crate::model::{Bound, Glam, ModelConfig, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Mixup Beta parameter; 0 disables mixup.
    pub alpha: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr0: 1e-4,
            lr_decay: 0.95,
            lr_floor: 1e-6,
            weight_decay: 1e-6,
            alpha: 0.5,
            seed: 0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite value >= 0");
        }
        if self.lr_floor > self.lr0 || self.lr_floor < 0.0 {
            return bad("lr_floor must lie in [0, lr0]");
        }
        if self.batch_size == 0 || (self.alpha > 0.0 && self.batch_size < 2) {
            return bad("batch_size must be >= 1, and >= 2 when mixup is on");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        Ok(())
    }
}

/// `max(lr0 · decay^epoch, lr_floor)`, constant within an epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    (cfg.lr0 * cfg.lr_decay.powi(epoch as i32)).max(cfg.lr_floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub lr: f64,
    pub val_wa: Option<f64>,
    pub val_ua: Option<f64>,
    /// Whether this epoch's parameters became the kept snapshot.
    pub snapshot: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet<f32>,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned snapshot when validating.
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Validation(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        data[i * k + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// One optimization step on a batch; returns the batch loss.
fn train_step(
    params: &mut ParameterSet<f32>,
    adam: &mut AdamState<f32>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    x: Tensor<f32>,
    y: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, true);
    let xv = g.leaf(x, false);
    let fo = Glam::new(model_cfg, &bound, params.bn(), Mode::Train).forward(&mut g, xv)?;
    let loss = g.softmax_cross_entropy(fo.logits, y)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in bound.iter() {
        let grad = g
            .grad(v)
            .ok_or_else(|| Error::State(format!("parameter {name} received no gradient")))?;
        grads.insert(name.clone(), grad);
    }
    adam_step(params, &grads, adam, lr, cfg)?;
    for (name, stats) in &fo.bn_stats {
        params.bn_state_mut(name)?.update(stats);
    }
    Ok(value)
}

pub fn train(
    model_cfg: &ModelConfig,
    train_set: &[FeatureSegment],
    val_set: Option<&[FeatureSegment]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model_cfg, train_set, val_set, cfg, &mut |_| {})
}

/// The epoch loop. Parameters are initialized from `cfg.seed`; shuffling and
/// mixup draw from a separate stream of the same seed.
pub fn train_with_progress(
    model_cfg: &ModelConfig,
    train_set: &[FeatureSegment],
    val_set: Option<&[FeatureSegment]>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = ParameterSet::<f32>::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let k = model_cfg.n_classes;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterSet<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.alpha > 0.0 && batch.len() < 2 {
                continue;
            }
            let segs: Vec<&FeatureSegment> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut x = segments_to_tensor(&segs)?;
            let labels: Vec<usize> = segs.iter().map(|s| s.label).collect();
            let mut y = one_hot(&labels, k)?;
            if cfg.alpha > 0.0 {
                (x, y) = mixup_batch(&x, &y, cfg.alpha, &mut rng)?;
            }
            let loss = train_step(&mut params, &mut adam, model_cfg, cfg, x, &y, lr)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step as usize,
                });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Config("no usable training batch".into()));
        }
        let mut rec = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            lr,
            val_wa: None,
            val_ua: None,
            snapshot: false,
        };
        if let Some(val) = val_set {
            let report = evaluate_segments(&params, model_cfg, val)?.report;
            let score = (report.wa + report.ua) / 2.0;
            rec.val_wa = Some(report.wa);
            rec.val_ua = Some(report.ua);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, params.clone()));
                rec.snapshot = true;
            }
        }
        progress(&rec);
        history.push(rec);
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params, None),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        steps: step,
    })
}

#[cfg(test)]
mod tests;
