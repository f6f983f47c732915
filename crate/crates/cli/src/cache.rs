//! Per-utterance feature cache: a GTSR tensor of segments plus a JSON sidecar.

use std::path::{Path, PathBuf};

use glam_core::audio::{
    segment_utterance, FeatureMatrix, FeatureSegment, MfccConfig, MfccExtractor,
};
use glam_core::experiment::UtteranceFeatures;
use glam_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};
use crate::fsutil::atomic_write;
use crate::manifest::{Emotion, UtteranceRecord};

pub const CACHE_ENV: &str = "GLAM_CACHE_DIR";

/// `$GLAM_CACHE_DIR`, else `features/` beside the manifest.
pub fn cache_dir(manifest: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => manifest.parent().unwrap_or(Path::new(".")).join("features"),
    }
}

/// SHA-256 of the front-end configuration.
pub fn config_hash(cfg: &MfccConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("MfccConfig serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub utterance_id: String,
    pub label: Emotion,
    pub n_segments: usize,
    pub config_hash: String,
}

/// File stem for an utterance id. Ids that are not plain file names get a
/// digest suffix so that distinct ids never share a stem.
fn stem(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean == id && !id.starts_with('.') {
        clean
    } else {
        let digest = Sha256::digest(id.as_bytes());
        format!(
            "{clean}-{:02x}{:02x}{:02x}{:02x}",
            digest[0], digest[1], digest[2], digest[3]
        )
    }
}

pub fn tensor_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{}.gtsr", stem(id)))
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{}.json", stem(id)))
}

fn read_sidecar(dir: &Path, id: &str) -> Option<Sidecar> {
    let text = std::fs::read_to_string(sidecar_path(dir, id)).ok()?;
    serde_json::from_str(&text).ok()
}

fn is_fresh(dir: &Path, rec: &UtteranceRecord, hash: &str) -> bool {
    read_sidecar(dir, &rec.utterance_id).is_some_and(|s| {
        s.config_hash == hash && s.label == rec.label && s.utterance_id == rec.utterance_id
    }) && tensor_path(dir, &rec.utterance_id).is_file()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturesReport {
    pub cache_dir: PathBuf,
    pub extracted: usize,
    pub reused: usize,
    /// Segment count per class, in label order.
    pub segments_per_class: [usize; 4],
    /// Utterance id and message of every failed extraction.
    pub failures: Vec<(String, String)>,
}

impl FeaturesReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cache {}: {} extracted, {} reused, {} failed\n",
            self.cache_dir.display(),
            self.extracted,
            self.reused,
            self.failures.len()
        );
        for (e, n) in Emotion::ALL.iter().zip(self.segments_per_class) {
            s.push_str(&format!("  {:<8} {n} segments\n", e.name()));
        }
        for (id, msg) in &self.failures {
            s.push_str(&format!("  failed {id}: {msg}\n"));
        }
        s
    }
}

enum Outcome {
    Reused(usize),
    Extracted(usize),
}

fn extract_one(
    rec: &UtteranceRecord,
    dir: &Path,
    extractor: &MfccExtractor,
    hash: &str,
) -> Result<Outcome> {
    if is_fresh(dir, rec, hash) {
        let n = read_sidecar(dir, &rec.utterance_id).map_or(0, |s| s.n_segments);
        return Ok(Outcome::Reused(n));
    }
    let cfg = extractor.config();
    let clip = glam_core::audio::load_wav(&rec.wav_path).map_err(|e| match e {
        glam_core::Error::Io(source) => CliError::Io {
            path: rec.wav_path.clone(),
            source,
        },
        other => other.into(),
    })?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(CliError::Validation(format!(
            "{} is sampled at {} Hz, expected {} Hz",
            rec.wav_path.display(),
            clip.sample_rate,
            cfg.sample_rate
        )));
    }
    let feats = extractor.compute(&clip)?;
    let segs = segment_utterance(&feats, cfg, &rec.utterance_id, rec.label.index())?;
    let (frames, coeffs) = (cfg.segment_frames(), feats.coeffs);
    let data: Vec<f32> = segs
        .iter()
        .flat_map(|s| s.features.data.iter().copied())
        .collect();
    let tensor = Tensor::new(vec![segs.len(), frames, coeffs], data)?;
    atomic_write(&tensor_path(dir, &rec.utterance_id), &tensor.to_bytes())?;
    let sidecar = Sidecar {
        utterance_id: rec.utterance_id.clone(),
        label: rec.label,
        n_segments: segs.len(),
        config_hash: hash.to_string(),
    };
    crate::fsutil::atomic_write_json(&sidecar_path(dir, &rec.utterance_id), &sidecar)?;
    Ok(Outcome::Extracted(segs.len()))
}

/// Extracts and caches every record, reusing entries whose sidecar matches
/// the current configuration. Failures are collected, not fatal.
pub fn extract_features(
    records: &[UtteranceRecord],
    cfg: &MfccConfig,
    dir: &Path,
) -> Result<FeaturesReport> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let extractor = MfccExtractor::new(cfg)?;
    let hash = config_hash(cfg);
    let outcomes: Vec<Result<Outcome>> = records
        .par_iter()
        .map(|r| extract_one(r, dir, &extractor, &hash))
        .collect();
    let mut report = FeaturesReport {
        cache_dir: dir.to_path_buf(),
        extracted: 0,
        reused: 0,
        segments_per_class: [0; 4],
        failures: Vec::new(),
    };
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(Outcome::Reused(n)) => {
                report.reused += 1;
                report.segments_per_class[rec.label.index()] += n;
            }
            Ok(Outcome::Extracted(n)) => {
                report.extracted += 1;
                report.segments_per_class[rec.label.index()] += n;
            }
            Err(e) => report
                .failures
                .push((rec.utterance_id.clone(), e.to_string())),
        }
    }
    Ok(report)
}

/// Loads cached segments for `records`, in record order.
pub fn load_features(
    records: &[UtteranceRecord],
    cfg: &MfccConfig,
    dir: &Path,
) -> Result<Vec<UtteranceFeatures>> {
    let hash = config_hash(cfg);
    records
        .iter()
        .map(|rec| {
            if !is_fresh(dir, rec, &hash) {
                return Err(CliError::Config(format!(
                    "no up-to-date cached features for {} in {}; run `glam features` first",
                    rec.utterance_id,
                    dir.display()
                )));
            }
            let path = tensor_path(dir, &rec.utterance_id);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let t = Tensor::<f32>::from_bytes(&bytes)?;
            let &[n, frames, coeffs] = t.shape() else {
                return Err(CliError::Validation(format!(
                    "{} holds a rank-{} tensor, expected segments x frames x coeffs",
                    path.display(),
                    t.rank()
                )));
            };
            let data = t.into_data();
            let segments = (0..n)
                .map(|i| FeatureSegment {
                    features: FeatureMatrix {
                        frames,
                        coeffs,
                        data: data[i * frames * coeffs..(i + 1) * frames * coeffs].to_vec(),
                    },
                    utterance_id: rec.utterance_id.clone(),
                    segment_index: i,
                    label: rec.label.index(),
                })
                .collect();
            Ok(UtteranceFeatures {
                utterance_id: rec.utterance_id.clone(),
                label: rec.label.index(),
                segments,
            })
        })
        .collect()
}
