use serde::{Deserialize, Serialize};

use super::mfcc::{FeatureMatrix, MfccConfig};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// One fixed-length window of an utterance's MFCCs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSegment {
    pub features: FeatureMatrix,
    pub utterance_id: String,
    pub segment_index: usize,
    pub label: usize,
}

/// Cuts an utterance into overlapping windows of `segment_frames()` frames
/// spaced `step_frames()` apart. Utterances shorter than one window yield a
/// single zero-padded segment.
pub fn segment_utterance(
    features: &FeatureMatrix,
    cfg: &MfccConfig,
    utterance_id: &str,
    label: usize,
) -> Result<Vec<FeatureSegment>> {
    if features.frames == 0 || features.coeffs == 0 {
        return Err(Error::Validation(format!(
            "utterance {utterance_id} has an empty feature matrix"
        )));
    }
    let win = cfg.segment_frames();
    let step = cfg.step_frames();
    let c = features.coeffs;
    let make = |index: usize, data: Vec<f32>| FeatureSegment {
        features: FeatureMatrix {
            frames: win,
            coeffs: c,
            data,
        },
        utterance_id: utterance_id.to_string(),
        segment_index: index,
        label,
    };
    if features.frames < win {
        let mut data = features.data.clone();
        data.resize(win * c, 0.0);
        return Ok(vec![make(0, data)]);
    }
    let count = (features.frames - win) / step + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * step * c;
            make(i, features.data[start..start + win * c].to_vec())
        })
        .collect())
}

/// Per-coefficient mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(segments: &[FeatureSegment]) -> Result<Self> {
        let first = segments.first().ok_or_else(|| {
            Error::Validation("cannot fit feature statistics on zero segments".into())
        })?;
        let c = first.features.coeffs;
        let mut sum = vec![0.0f64; c];
        let mut count = 0usize;
        for s in segments {
            if s.features.coeffs != c {
                return Err(Error::Validation(
                    "segments disagree on coefficient count".into(),
                ));
            }
            for row in s.features.data.chunks_exact(c) {
                for (a, &v) in sum.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            count += s.features.frames;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; c];
        for s in segments {
            for row in s.features.data.chunks_exact(c) {
                for ((a, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v as f64 - m;
                    *a += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &mut FeatureMatrix) -> Result<()> {
        if features.coeffs != self.mean.len() {
            return Err(Error::Validation(format!(
                "statistics cover {} coefficients, features have {}",
                self.mean.len(),
                features.coeffs
            )));
        }
        for row in features.data.chunks_exact_mut(features.coeffs) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }
}

/// Z-normalizes every coefficient. With `stats == None` the statistics are
/// fitted on `segments` (the training split) and returned for reuse.
pub fn normalize_features(
    segments: &[FeatureSegment],
    stats: Option<&FeatureStats>,
) -> Result<(Vec<FeatureSegment>, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::fit(segments)?,
    };
    let mut out = segments.to_vec();
    for s in &mut out {
        stats.apply(&mut s.features)?;
    }
    Ok((out, stats))
}
