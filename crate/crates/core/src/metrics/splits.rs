use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// 80% train, 20% test, no validation.
    Holdout,
    /// 8:1:1 train/validation/test.
    Ratio811,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Holdout => "holdout",
            SplitMode::Ratio811 => "ratio811",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" | "holdout_80_20" => Ok(SplitMode::Holdout),
            "ratio811" | "ratio_8_1_1" => Ok(SplitMode::Ratio811),
            other => Err(Error::Config(format!(
                "unknown split mode {other:?} (expected holdout or ratio811)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Indices into the record list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Option<Vec<usize>>,
    pub test: Vec<usize>,
}

/// One random utterance-level partition per run; run `i` shuffles with seed
/// `seed + i`.
pub fn make_splits(
    n_records: usize,
    mode: SplitMode,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Split>> {
    if n_records == 0 {
        return Err(Error::Config("no records to split".into()));
    }
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let n = n_records as f64;
    let n_train = (0.8 * n).round() as usize;
    let n_val = match mode {
        SplitMode::Holdout => 0,
        SplitMode::Ratio811 => (0.1 * n).round() as usize,
    };
    let n_test = n_records.saturating_sub(n_train + n_val);
    if n_train == 0 || n_test == 0 || (mode == SplitMode::Ratio811 && n_val == 0) {
        return Err(Error::Config(format!(
            "{n_records} records give an empty part under {mode} \
             (train {n_train}, val {n_val}, test {n_test})"
        )));
    }
    Ok((0..n_runs)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n_records).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)));
            let test = idx.split_off(n_train + n_val);
            let val = match mode {
                SplitMode::Holdout => None,
                SplitMode::Ratio811 => Some(idx.split_off(n_train)),
            };
            Split {
                train: idx,
                val,
                test,
            }
        })
        .collect())
}
