//! Utterance-level aggregation, classification metrics and repeated-split
//! bookkeeping.

mod splits;

pub use splits::{make_splits, Split, SplitMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean of an utterance's per-segment probability vectors and the class it
/// predicts.
pub fn aggregate_utterance(segment_probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = segment_probs
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate zero segments".into()))?;
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in segment_probs {
        if p.len() != k {
            return Err(Error::Validation(format!(
                "segment probability vectors disagree in length ({} vs {k})",
                p.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = segment_probs.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let class = argmax(&mean);
    Ok((mean, class))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]`: utterances of true class `i` predicted as `j`.
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

fn check_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Validation(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        check_labels(truth, pred, k)?;
        let mut counts = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[t][p] += 1;
        }
        Ok(Self {
            counts,
            class_names: default_names(k),
        })
    }

    pub fn with_names(mut self, names: &[&str]) -> Result<Self> {
        if names.len() != self.counts.len() {
            return Err(Error::Validation(format!(
                "{} class names for {} classes",
                names.len(),
                self.counts.len()
            )));
        }
        self.class_names = names.iter().map(|s| s.to_string()).collect();
        Ok(self)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// The four metrics, read off the matrix.
    pub fn metrics(&self) -> MetricsReport {
        let k = self.counts.len();
        let total = self.total();
        let diag: u64 = (0..k).map(|i| self.counts[i][i]).sum();
        let row = |i: usize| self.counts[i].iter().sum::<u64>();
        let col = |j: usize| (0..k).map(|i| self.counts[i][j]).sum::<u64>();

        let mut recalls = Vec::new();
        let mut f1s = Vec::new();
        for c in 0..k {
            let (tp, support, predicted) = (self.counts[c][c], row(c), col(c));
            if support > 0 {
                recalls.push(tp as f64 / support as f64);
            }
            if support > 0 || predicted > 0 {
                f1s.push(f1(tp, predicted - tp, support - tp));
            }
        }
        let fp: u64 = (0..k).map(|c| col(c) - self.counts[c][c]).sum();
        let fneg: u64 = (0..k).map(|c| row(c) - self.counts[c][c]).sum();
        MetricsReport {
            wa: ratio(diag, total),
            ua: mean(&recalls),
            macro_f1: mean(&f1s),
            micro_f1: f1(diag, fp, fneg),
            confusion: self.clone(),
            n_utterances: total as usize,
        }
    }

    /// Fixed-width text rendering with true classes as rows.
    pub fn to_text(&self) -> String {
        let w = self
            .class_names
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .chain(["true\\pred".len()])
            .max()
            .unwrap_or(1);
        let mut out = format!("{:>w$}", "true\\pred");
        for n in &self.class_names {
            out.push_str(&format!(" {n:>w$}"));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(&format!("{name:>w$}"));
            for c in row {
                out.push_str(&format!(" {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// F1 from counts; 0 when precision and recall are both 0. When precision
/// equals recall the value is returned as is, so pooled single-label F1 is
/// bitwise equal to accuracy.
fn f1(tp: u64, fp: u64, fneg: u64) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fneg);
    if p + r == 0.0 {
        0.0
    } else if p == r {
        p
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wa: f64,
    pub ua: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub n_utterances: usize,
}

impl MetricsReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            wa: self.wa,
            ua: self.ua,
            macro_f1: self.macro_f1,
            micro_f1: self.micro_f1,
        }
    }
}

/// WA, UA and both F1 scores straight from the label lists.
pub fn compute_metrics(truth: &[usize], pred: &[usize], k: usize) -> Result<MetricsReport> {
    check_labels(truth, pred, k)?;
    let n = truth.len() as u64;
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as u64;
    let mut tp = vec![0u64; k];
    let mut support = vec![0u64; k];
    let mut predicted = vec![0u64; k];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let recalls: Vec<f64> = (0..k)
        .filter(|&c| support[c] > 0)
        .map(|c| tp[c] as f64 / support[c] as f64)
        .collect();
    let f1s: Vec<f64> = (0..k)
        .filter(|&c| support[c] > 0 || predicted[c] > 0)
        .map(|c| f1(tp[c], predicted[c] - tp[c], support[c] - tp[c]))
        .collect();
    let wrong = n - correct;
    Ok(MetricsReport {
        wa: ratio(correct, n),
        ua: mean(&recalls),
        macro_f1: mean(&f1s),
        micro_f1: f1(correct, wrong, wrong),
        confusion: ConfusionMatrix::from_labels(truth, pred, k)?,
        n_utterances: truth.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub wa: f64,
    pub ua: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

impl MetricValues {
    fn as_array(&self) -> [f64; 4] {
        [self.wa, self.ua, self.macro_f1, self.micro_f1]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            wa: a[0],
            ua: a[1],
            macro_f1: a[2],
            micro_f1: a[3],
        }
    }
}

/// Mean and sample standard deviation of each metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n_runs: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
    /// A single run has no spread; its std is reported as 0.
    pub degenerate: bool,
}

impl SplitSummary {
    pub fn from_runs(runs: &[MetricValues]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Validation("cannot summarize zero runs".into()));
        }
        let n = runs.len() as f64;
        let mut m = [0.0; 4];
        for r in runs {
            for (a, v) in m.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        let mut s = [0.0; 4];
        if runs.len() > 1 {
            for r in runs {
                for ((a, v), mu) in s.iter_mut().zip(r.as_array()).zip(m) {
                    *a += (v - mu) * (v - mu);
                }
            }
            s.iter_mut().for_each(|a| *a = (*a / (n - 1.0)).sqrt());
        }
        Ok(Self {
            n_runs: runs.len(),
            mean: MetricValues::from_array(m),
            std: MetricValues::from_array(s),
            degenerate: runs.len() == 1,
        })
    }
}

/// Per-run CSV with a header row.
pub fn runs_csv(runs: &[MetricValues]) -> String {
    let mut out = String::from("run_id,wa,ua,macro_f1,micro_f1\n");
    for (i, r) in runs.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6}\n",
            r.wa, r.ua, r.macro_f1, r.micro_f1
        ));
    }
    out
}
