//! The float64 gradient-check suite: every differentiable graph operation plus
//! the model's composite blocks, each compared against central differences.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[cfg(feature = "fault-injection")]
use crate::autodiff::BackwardFault;
use crate::autodiff::{
    grad_check, Activation, BnState, GradCheckOptions, Graph, Mode, Var, BN_EPS, BN_MOMENTUM,
};
use crate::error::Result;
use crate::model::{Bound, Glam, ModelConfig, ParameterSet};
use crate::tensor::Tensor;

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for composites containing batch normalization.
pub const BN_COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Coordinates compared across all inputs.
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// One aligned line per case.
    pub fn to_text(&self) -> String {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<width$}  max_rel_err {:.3e}  tol {:.0e}  coords {:>5}  {}",
                c.name,
                c.max_rel_err,
                c.tolerance,
                c.checked,
                if c.passed { "ok" } else { "FAIL" },
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(
            s,
            "{} cases, {failed} failed, {:.1}s",
            self.cases.len(),
            self.elapsed.as_secs_f64()
        );
        s
    }
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Reduces `y` to a scalar through a fixed random projection.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(randn(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        tolerance,
        inputs,
        f: Box::new(f),
    }
}

/// Small model used for the composite cases.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        in_height: 8,
        in_width: 10,
        n_multiscale_blocks: 1,
        branch_channels: 3,
        final_channels: 4,
        final_kernel: 3,
        head_hidden: 6,
        ..Default::default()
    }
}

/// Parameters of `cfg` with the identity-initialized fusion tensors replaced
/// by random values, so their gradients are not trivially structured.
fn model_inputs(
    cfg: &ModelConfig,
    seed: u64,
    prefixes: &[&str],
) -> Result<(Vec<String>, Vec<Tensor<f64>>)> {
    let mut params = ParameterSet::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0);
    let fusion: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("fusion.gate") || n.starts_with("fusion.proj_out"))
        .cloned()
        .collect();
    for name in fusion {
        let shape = params.get(&name)?.shape().to_vec();
        params.set(&name, randn(&shape, &mut rng).map(|v| 0.3 * v))?;
    }
    Ok(params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .unzip())
}

fn bound(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

fn cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: &[usize]| randn(shape, &mut rng);
    let mut out = vec![
        case("add", OP_TOLERANCE, vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        }),
        case(
            "add_scalar_broadcast",
            OP_TOLERANCE,
            vec![r(&[3, 4]), r(&[1])],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 2)
            },
        ),
        case("mul", OP_TOLERANCE, vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 3)
        }),
        case(
            "sum",
            OP_TOLERANCE,
            vec![r(&[5, 2])],
            |g, v| Ok(g.sum(v[0])),
        ),
        case(
            "matmul",
            OP_TOLERANCE,
            vec![r(&[3, 5]), r(&[5, 4])],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 4)
            },
        ),
        case(
            "linear",
            OP_TOLERANCE,
            vec![r(&[3, 5]), r(&[5, 4]), r(&[4])],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, 5)
            },
        ),
        case(
            "conv2d_same",
            OP_TOLERANCE,
            vec![r(&[2, 3, 5, 6]), r(&[4, 3, 3, 3]), r(&[4])],
            |g, v| {
                let y = g.conv2d_same(v[0], v[1], v[2])?;
                project(g, y, 6)
            },
        ),
        case(
            "conv2d_same_1x3",
            OP_TOLERANCE,
            vec![r(&[2, 2, 4, 5]), r(&[3, 2, 1, 3]), r(&[3])],
            |g, v| {
                let y = g.conv2d_same(v[0], v[1], v[2])?;
                project(g, y, 7)
            },
        ),
        case(
            "batchnorm2d_train",
            OP_TOLERANCE,
            vec![r(&[3, 2, 3, 2]), r(&[2]), r(&[2])],
            |g, v| {
                let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2])?;
                project(g, y, 8)
            },
        ),
        case(
            "batchnorm2d_eval",
            OP_TOLERANCE,
            vec![r(&[3, 2, 3, 2]), r(&[2]), r(&[2])],
            |g, v| {
                let state = BnState {
                    running_mean: Some(vec![0.3, -0.2]),
                    running_var: Some(vec![1.7, 0.4]),
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                };
                let y = g.batchnorm2d_eval(v[0], v[1], v[2], &state)?;
                project(g, y, 9)
            },
        ),
        case(
            "layer_norm",
            OP_TOLERANCE,
            vec![r(&[2, 3, 6]), r(&[6]), r(&[6])],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                project(g, y, 10)
            },
        ),
        case("relu", OP_TOLERANCE, vec![r(&[40])], |g, v| {
            let y = g.activation(v[0], Activation::Relu);
            project(g, y, 11)
        }),
        case(
            "gelu",
            OP_TOLERANCE,
            vec![r(&[40]).map(|x| 2.0 * x)],
            |g, v| {
                let y = g.activation(v[0], Activation::Gelu);
                project(g, y, 12)
            },
        ),
        case("maxpool2d", OP_TOLERANCE, vec![r(&[2, 2, 4, 6])], |g, v| {
            let y = g.maxpool2d(v[0], (2, 2))?;
            project(g, y, 13)
        }),
        case(
            "concat_channels",
            OP_TOLERANCE,
            vec![r(&[2, 2, 3, 3]), r(&[2, 1, 3, 3])],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, 14)
            },
        ),
        case(
            "concat_width",
            OP_TOLERANCE,
            vec![r(&[2, 2, 3, 3]), r(&[2, 2, 3, 2])],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], 3)?;
                project(g, y, 15)
            },
        ),
        case("slice", OP_TOLERANCE, vec![r(&[2, 7])], |g, v| {
            let y = g.slice(v[0], 1, 2, 3)?;
            project(g, y, 16)
        }),
        case("split_half", OP_TOLERANCE, vec![r(&[3, 8])], |g, v| {
            let (a, b) = g.split_half(v[0], 1)?;
            let y = g.mul(a, b)?;
            project(g, y, 17)
        }),
        case("reshape", OP_TOLERANCE, vec![r(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y, 18)
        }),
        case(
            "softmax_cross_entropy",
            OP_TOLERANCE,
            vec![r(&[3, 4])],
            |g, v| {
                let target = Tensor::new(
                    vec![3, 4],
                    vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.75, 0.0, 0.1, 0.2, 0.3, 0.4],
                )?;
                g.softmax_cross_entropy(v[0], &target)
            },
        ),
    ];

    let cfg = small_config();
    let (names, mut inputs) = model_inputs(&cfg, 3, &["ms0."])?;
    inputs.insert(0, r(&[2, 1, 8, 10]));
    let block_cfg = cfg.clone();
    out.push(case(
        "multiscale_block",
        BN_COMPOSITE_TOLERANCE,
        inputs,
        move |g, v| {
            let b = bound(&names, &v[1..]);
            let bn = ParameterSet::<f64>::init(&block_cfg, 0)?.bn().clone();
            let y = Glam::new(&block_cfg, &b, &bn, Mode::Train).multiscale_block(
                g,
                0,
                crate::model::BlockPosition::First,
                v[0],
            )?;
            project(g, y, 19)
        },
    ));

    let (names, mut inputs) = model_inputs(&cfg, 4, &["final"])?;
    inputs.insert(0, r(&[2, 3, 4, 10]));
    let final_cfg = cfg.clone();
    out.push(case(
        "final_conv",
        BN_COMPOSITE_TOLERANCE,
        inputs,
        move |g, v| {
            let b = bound(&names, &v[1..]);
            let bn = ParameterSet::<f64>::init(&final_cfg, 0)?.bn().clone();
            let y = Glam::new(&final_cfg, &b, &bn, Mode::Train).final_conv(g, v[0])?;
            project(g, y, 20)
        },
    ));

    // C = 3, d_f = 8
    let fusion_cfg = ModelConfig {
        in_height: 2,
        in_width: 8,
        branch_channels: 2,
        final_channels: 3,
        final_kernel: 1,
        head_hidden: 3,
        ..cfg.clone()
    };
    let (names, mut inputs) = model_inputs(&fusion_cfg, 5, &["fusion."])?;
    let plan = fusion_cfg.shape_plan()?;
    inputs.insert(0, r(&[2, plan.d_model(), plan.d_f()]));
    out.push(case("global_aware", OP_TOLERANCE, inputs, move |g, v| {
        let b = bound(&names, &v[1..]);
        let bn = ParameterSet::<f64>::init(&fusion_cfg, 0)?.bn().clone();
        let y = Glam::new(&fusion_cfg, &b, &bn, Mode::Eval)
            .global_aware(g, v[0])?
            .out;
        project(g, y, 21)
    }));

    let (names, mut inputs) = model_inputs(&cfg, 6, &[""])?;
    inputs.insert(0, r(&[3, 1, 8, 10]));
    out.push(case(
        "full_model",
        BN_COMPOSITE_TOLERANCE,
        inputs,
        move |g, v| {
            let b = bound(&names, &v[1..]);
            let bn = ParameterSet::<f64>::init(&cfg, 0)?.bn().clone();
            let fo = Glam::new(&cfg, &b, &bn, Mode::Train).forward(g, v[0])?;
            let target = Tensor::new(
                vec![3, 4],
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0],
            )?;
            g.softmax_cross_entropy(fo.logits, &target)
        },
    ));
    Ok(out)
}

fn run(prepare: &dyn Fn(&mut Graph<f64>)) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for c in cases()? {
        let opts = GradCheckOptions {
            tolerance: c.tolerance,
            ..Default::default()
        };
        let f = &c.f;
        let report = grad_check(
            |g, v| {
                prepare(g);
                f(g, v)
            },
            &c.inputs,
            &opts,
        )?;
        results.push(CaseResult {
            name: c.name.to_string(),
            tolerance: c.tolerance,
            max_rel_err: report.max_rel_err,
            checked: report.inputs.iter().map(|i| i.checked).sum(),
            passed: report.passed,
        });
    }
    Ok(SuiteReport {
        cases: results,
        elapsed: start.elapsed(),
    })
}

pub fn run_gradcheck_suite() -> Result<SuiteReport> {
    run(&|_| {})
}

/// The suite with `fault` injected into every graph it builds.
#[cfg(feature = "fault-injection")]
pub fn run_gradcheck_suite_with_fault(fault: BackwardFault) -> Result<SuiteReport> {
    run(&move |g| g.inject_fault(fault))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes_and_lists_every_case() {
        let report = run_gradcheck_suite().unwrap();
        assert!(report.passed(), "{}", report.to_text());
        let text = report.to_text();
        for name in ["conv2d_same", "layer_norm", "global_aware", "full_model"] {
            assert!(text.contains(name));
        }
        assert!(report.cases.iter().all(|c| c.checked > 0));
    }

    #[cfg(feature = "fault-injection")]
    #[test]
    fn conv_sign_fault_is_reported() {
        let report = run_gradcheck_suite_with_fault(BackwardFault::ConvInputSign).unwrap();
        assert!(!report.passed());
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"conv2d_same"), "{failed:?}");
        assert!(!failed.contains(&"matmul"));
        assert!(report.to_text().contains("FAIL"));
    }
}
