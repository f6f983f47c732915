use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error. Gradients smaller than this are
/// effectively compared in absolute terms, where central differences carry
/// ~1e-10 of rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Inputs larger than this are checked on a seeded random subset of
    /// coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the graph's analytic gradients of a scalar function against
/// central differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return shape_err(format!(
            "grad_check: function must return a scalar, got {:?}",
            g.shape(out)
        ));
    }
    let analytic: Vec<Vec<f64>> = if g.requires_grad(out) {
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; t.numel()], Tensor::into_data)
            })
            .collect()
    } else {
        inputs.iter().map(|t| vec![0.0; t.numel()]).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        let n = inputs[idx].numel();
        let coords: Vec<usize> = if n > opts.max_coords {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = inputs[idx].data()[c];
            work[idx].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[idx].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let e = rel_err(grad[c], numeric);
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
        }
        reports.push(InputCheck {
            max_rel_err: worst,
            checked: coords.len(),
            passed: worst < opts.tolerance,
        });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: reports.iter().all(|r| r.passed),
        inputs: reports,
        max_rel_err,
    })
}
