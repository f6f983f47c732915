use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};

/// MFCC front-end and segmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    /// Length of one segment.
    pub segment_secs: f64,
    /// Overlap between consecutive segments.
    pub overlap_secs: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 400,
            hop: 160,
            fft_size: 512,
            n_mels: 40,
            n_mfcc: 40,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            segment_secs: 2.0,
            overlap_secs: 1.6,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 || self.window_len == 0 || self.hop == 0 {
            return bad("sample_rate, window_len and hop must be positive");
        }
        if self.fft_size < self.window_len {
            return bad("fft_size must be at least window_len");
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("n_mfcc must be in 1..=n_mels");
        }
        if self.hop > self.window_len {
            return bad("hop must not exceed window_len");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if !(self.overlap_secs >= 0.0 && self.overlap_secs < self.segment_secs) {
            return bad("overlap must be non-negative and shorter than a segment");
        }
        if self.segment_samples() < self.window_len {
            return bad("segment shorter than one analysis window");
        }
        if self.step_frames() == 0 {
            return bad("segment step is shorter than one hop");
        }
        Ok(())
    }

    /// `1 + ⌊(n − window_len)/hop⌋`, or 0 when shorter than a window.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.window_len {
            0
        } else {
            1 + (n_samples - self.window_len) / self.hop
        }
    }

    fn segment_samples(&self) -> usize {
        (self.segment_secs * self.sample_rate as f64).round() as usize
    }

    /// Frames in one segment (198 for the defaults).
    pub fn segment_frames(&self) -> usize {
        self.frame_count(self.segment_samples())
    }

    /// Frame offset between segment starts (40 for the defaults).
    pub fn step_frames(&self) -> usize {
        let step =
            ((self.segment_secs - self.overlap_secs) * self.sample_rate as f64).round() as usize;
        step / self.hop
    }
}

/// Row-major `frames × coeffs` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub coeffs: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.coeffs..(i + 1) * self.coeffs]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT and FFT plan for one config.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// `n_mels × (fft_size/2 + 1)`
    filters: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    /// `n_mfcc × n_mels`
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64)
            .collect();
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                bin_hz
                    .iter()
                    .map(|&f| ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0))
                    .collect()
            })
            .collect();
        let centers_hz = edges[1..=cfg.n_mels].to_vec();

        let nm = cfg.n_mels as f64;
        let dct = (0..cfg.n_mfcc)
            .map(|k| {
                let s = if k == 0 {
                    (1.0 / nm).sqrt()
                } else {
                    (2.0 / nm).sqrt()
                };
                (0..cfg.n_mels)
                    .map(|j| s * (PI * k as f64 * (2 * j + 1) as f64 / (2.0 * nm)).cos())
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            centers_hz,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Center frequency of each mel filter in Hz.
    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Config(format!(
                "clip sample rate {} Hz does not match configured {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        if clip.samples.len() < self.cfg.window_len {
            return Err(Error::TooShort {
                samples: clip.samples.len(),
                needed: self.cfg.window_len,
            });
        }
        Ok(())
    }

    /// Log mel-filterbank energies, one row per frame.
    pub fn log_mel(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        self.check_clip(clip)?;
        let cfg = &self.cfg;
        let x = &clip.samples;
        let emphasized: Vec<f64> = (0..x.len())
            .map(|t| {
                let prev = if t == 0 { 0.0 } else { x[t - 1] as f64 };
                x[t] as f64 - cfg.pre_emphasis * prev
            })
            .collect();
        let frames = cfg.frame_count(x.len());
        let n_bins = cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let start = f * cfg.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.window_len {
                    Complex::new(emphasized[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.push(
                self.filters
                    .iter()
                    .map(|w| {
                        let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                        e.max(cfg.log_floor).ln()
                    })
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Orthonormal DCT-II of each log-mel row, truncated to `n_mfcc`.
    pub fn cepstra(&self, log_mel: &[Vec<f64>]) -> FeatureMatrix {
        let coeffs = self.cfg.n_mfcc;
        let mut data = Vec::with_capacity(log_mel.len() * coeffs);
        for row in log_mel {
            for basis in &self.dct {
                data.push(basis.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() as f32);
            }
        }
        FeatureMatrix {
            frames: log_mel.len(),
            coeffs,
            data,
        }
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        Ok(self.cepstra(&self.log_mel(clip)?))
    }
}

/// Pre-emphasis, Hann-windowed power spectrum without centering, HTK mel
/// filterbank, log with floor, orthonormal DCT-II.
pub fn compute_mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccExtractor::new(cfg)?.compute(clip)
}
