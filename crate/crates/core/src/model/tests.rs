use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, BnState, GradCheckOptions, Graph, Mode};
use crate::error::Error;
use crate::tensor::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn small() -> ModelConfig {
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

/// Replaces the identity-initialized fusion tensors so their gradients are
/// exercised.
fn perturb_fusion(params: &mut ParameterSet<f64>, seed: u64) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("fusion.gate") || n.starts_with("fusion.proj_out"))
        .cloned()
        .collect();
    for (i, name) in names.iter().enumerate() {
        let shape = params.get(name).unwrap().shape().to_vec();
        let t = random(&shape, seed + i as u64).map(|v| v * 0.3);
        params.set(name, t).unwrap();
    }
}

fn eval_forward(
    params: &ParameterSet<f64>,
    cfg: &ModelConfig,
    x: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, false);
    let xv = g.leaf(x.clone(), false);
    let fo = Glam::new(cfg, &bound, params.bn(), Mode::Eval)
        .forward(&mut g, xv)
        .unwrap();
    let w = bound.get("head.out.weight").unwrap();
    let b = bound.get("head.out.bias").unwrap();
    let again = g.linear(fo.embeddings, w, b).unwrap();
    (
        g.value(fo.logits).clone(),
        g.value(fo.embeddings).clone(),
        g.value(again).clone(),
    )
}

#[test]
fn block_shapes_follow_the_axis_convention() {
    let cfg = ModelConfig::default();
    let params = ParameterSet::<f64>::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let mut net = Glam::new(&cfg, &bound, params.bn(), Mode::Eval);
    let x = g.leaf(random(&[1, 1, 198, 40], 1), false);
    let b0 = net
        .multiscale_block(&mut g, 0, BlockPosition::First, x)
        .unwrap();
    assert_eq!(g.shape(b0), [1, 16, 99, 40]);
    let b1 = net
        .multiscale_block(&mut g, 1, BlockPosition::Rest, b0)
        .unwrap();
    assert_eq!(g.shape(b1), [1, 32, 49, 20]);
    let f = net.final_conv(&mut g, b1).unwrap();
    assert_eq!(g.shape(f), [1, 32, 49, 20]);
}

#[test]
fn block_rejects_channel_mismatch() {
    let cfg = ModelConfig::default();
    let params = ParameterSet::<f64>::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let mut net = Glam::new(&cfg, &bound, params.bn(), Mode::Eval);
    let x = g.leaf(random(&[1, 2, 8, 8], 1), false);
    assert!(matches!(
        net.multiscale_block(&mut g, 0, BlockPosition::First, x),
        Err(Error::Shape(_))
    ));
}

#[test]
fn zero_input_gives_zero_block_output() {
    let cfg = ModelConfig::default();
    let params = ParameterSet::<f64>::init(&cfg, 5).unwrap();
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let mut net = Glam::new(&cfg, &bound, params.bn(), Mode::Eval);
    let x = g.leaf(Tensor::zeros(vec![2, 1, 198, 40]), false);
    let y = net
        .multiscale_block(&mut g, 0, BlockPosition::First, x)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_kernel_final_conv_is_relu() {
    let cfg = ModelConfig::default();
    let mut params = ParameterSet::<f64>::init(&cfg, 0).unwrap();
    let (c, k) = (32, 5);
    let mut w = vec![0.0; c * c * k * k];
    for ch in 0..c {
        w[((ch * c + ch) * k + k / 2) * k + k / 2] = 1.0;
    }
    params
        .set("final.weight", Tensor::new(vec![c, c, k, k], w).unwrap())
        .unwrap();
    let mut bn = params.bn().clone();
    // cancel eps so the normalization is exactly the identity
    bn.insert(
        "final_bn".into(),
        BnState {
            running_var: Some(vec![1.0 - crate::autodiff::BN_EPS; c]),
            ..BnState::new(c)
        },
    );
    let x = random(&[2, c, 49, 20], 9);
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let xv = g.leaf(x.clone(), false);
    let y = Glam::new(&cfg, &bound, &bn, Mode::Eval)
        .final_conv(&mut g, xv)
        .unwrap();
    assert_eq!(g.shape(y), x.shape());
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.max(0.0)).abs() < 1e-12);
    }
}

/// A config whose fusion block sees `c` channels of length `d_f`.
fn fusion_params(c: usize, d_f: usize, seed: u64) -> (ModelConfig, ParameterSet<f64>) {
    let cfg = ModelConfig {
        in_height: 2,
        in_width: d_f,
        n_multiscale_blocks: 1,
        branch_channels: 2,
        final_channels: c,
        final_kernel: 1,
        head_hidden: 3,
        ..Default::default()
    };
    let plan = cfg.shape_plan().unwrap();
    assert_eq!((plan.d_model(), plan.d_f()), (c, d_f));
    (cfg.clone(), ParameterSet::init(&cfg, seed).unwrap())
}

#[test]
fn global_aware_is_identity_at_init() {
    let (cfg, params) = fusion_params(4, 10, 3);
    let x = random(&[2, 4, 10], 11);
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let xv = g.leaf(x.clone(), false);
    let nodes = Glam::new(&cfg, &bound, params.bn(), Mode::Eval)
        .global_aware(&mut g, xv)
        .unwrap();
    assert_eq!(g.value(nodes.out), &x);
    assert!(g.value(nodes.gate).data().iter().all(|&v| v == 1.0));
}

#[test]
fn untouched_gate_passes_u_through() {
    let (cfg, mut params) = fusion_params(4, 10, 3);
    let w = random(&[20, 10], 12);
    params.set("fusion.proj_out.weight", w).unwrap();
    let x = random(&[2, 4, 10], 13);
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let xv = g.leaf(x.clone(), false);
    let nodes = Glam::new(&cfg, &bound, params.bn(), Mode::Eval)
        .global_aware(&mut g, xv)
        .unwrap();
    assert_eq!(g.value(nodes.h), g.value(nodes.u));
    assert_ne!(g.value(nodes.out), &x);
}

#[test]
fn global_aware_rejects_wrong_d_f() {
    let (cfg, params) = fusion_params(4, 10, 3);
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let xv = g.leaf(random(&[2, 4, 12], 1), false);
    let r = Glam::new(&cfg, &bound, params.bn(), Mode::Eval).global_aware(&mut g, xv);
    assert!(matches!(r, Err(Error::Shape(_))));
}

/// Scalar loss `Σ y ⊙ r` for a fixed random `r`.
fn project(
    g: &mut Graph<f64>,
    y: crate::autodiff::Var,
    seed: u64,
) -> crate::Result<crate::autodiff::Var> {
    let r = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn named_inputs(params: &ParameterSet<f64>, prefix: &[&str]) -> (Vec<String>, Vec<Tensor<f64>>) {
    params
        .iter()
        .filter(|(n, _)| prefix.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .unzip()
}

#[test]
fn global_aware_gradients_match_finite_differences() {
    let (cfg, mut params) = fusion_params(4, 10, 3);
    perturb_fusion(&mut params, 40);
    let (names, mut inputs) = named_inputs(&params, &["fusion."]);
    inputs.insert(0, random(&[2, 4, 10], 14));
    let bn = params.bn().clone();
    let report = grad_check(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = Glam::new(&cfg, &bound, &bn, Mode::Eval)
                .global_aware(g, v[0])?
                .out;
            project(g, out, 99)
        },
        &inputs,
        &GradCheckOptions {
            tolerance: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn final_conv_gradients_match_finite_differences() {
    let cfg = small();
    let params = ParameterSet::<f64>::init(&cfg, 2).unwrap();
    let (names, mut inputs) = named_inputs(&params, &["final"]);
    inputs.insert(0, random(&[2, 3, 4, 10], 15));
    let bn = params.bn().clone();
    let report = grad_check(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = Glam::new(&cfg, &bound, &bn, Mode::Train).final_conv(g, v[0])?;
            project(g, out, 98)
        },
        &inputs,
        &GradCheckOptions {
            tolerance: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = small();
    let mut params = ParameterSet::<f64>::init(&cfg, 6).unwrap();
    perturb_fusion(&mut params, 50);
    let (names, mut inputs) = named_inputs(&params, &[""]);
    inputs.insert(0, random(&[3, 1, 8, 10], 16));
    let target = Tensor::new(
        vec![3, 4],
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let bn = params.bn().clone();
    let report = grad_check(
        |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let fo = Glam::new(&cfg, &bound, &bn, Mode::Train).forward(g, v[0])?;
            g.softmax_cross_entropy(fo.logits, &target)
        },
        &inputs,
        &GradCheckOptions {
            tolerance: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn default_model_maps_to_four_logits() {
    let cfg = ModelConfig::default();
    let params = ParameterSet::<f32>::init(&cfg, 0).unwrap();
    let x = random(&[2, 1, 198, 40], 17).cast::<f32>();
    let logits = predict_logits(&params, &cfg, &x).unwrap();
    assert_eq!(logits.shape(), [2, 4]);
    let emb = export_embeddings(&params, &cfg, &x).unwrap();
    assert_eq!(emb.shape(), [2, 64]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = small();
    let params = ParameterSet::<f32>::init(&cfg, 0).unwrap();
    let x = Tensor::<f32>::zeros(vec![1, 1, 8, 11]);
    assert!(matches!(
        predict_logits(&params, &cfg, &x),
        Err(Error::Shape(_))
    ));
}

#[test]
fn identical_inputs_give_identical_rows() {
    let cfg = small();
    let params = ParameterSet::<f64>::init(&cfg, 1).unwrap();
    let one = random(&[1, 1, 8, 10], 18);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let x = Tensor::new(vec![2, 1, 8, 10], data).unwrap();
    let (logits, emb, again) = eval_forward(&params, &cfg, &x);
    assert_eq!(logits.data()[..4], logits.data()[4..]);
    assert_eq!(emb.data()[..6], emb.data()[6..]);
    assert_eq!(logits, again);
}

#[test]
fn fusion_toggle_is_invisible_at_init() {
    let on = small();
    let off = ModelConfig {
        fusion: FusionMode::None,
        ..on.clone()
    };
    let x = random(&[3, 1, 8, 10], 19);
    let a = eval_forward(&ParameterSet::init(&on, 8).unwrap(), &on, &x).0;
    let b = eval_forward(&ParameterSet::init(&off, 8).unwrap(), &off, &x).0;
    assert_eq!(a, b);
}

#[test]
fn eval_is_batch_size_independent() {
    let cfg = small();
    let params = ParameterSet::<f32>::init(&cfg, 2).unwrap();
    let batch = random(&[5, 1, 8, 10], 20).cast::<f32>();
    let all = predict_logits(&params, &cfg, &batch).unwrap();
    for i in 0..5 {
        let one = Tensor::new(
            vec![1, 1, 8, 10],
            batch.data()[i * 80..(i + 1) * 80].to_vec(),
        )
        .unwrap();
        let l = predict_logits(&params, &cfg, &one).unwrap();
        for (a, b) in l.data().iter().zip(&all.data()[i * 4..(i + 1) * 4]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_forward_mutates_nothing() {
    let cfg = small();
    let params = ParameterSet::<f64>::init(&cfg, 2).unwrap();
    let before = params.clone();
    let x = random(&[2, 1, 8, 10], 21);
    let a = eval_forward(&params, &cfg, &x).0;
    let b = eval_forward(&params, &cfg, &x).0;
    assert_eq!(a, b);
    assert_eq!(params, before);
}

/// Parameter count written out layer by layer from the architecture.
fn closed_form_count(cfg: &ModelConfig) -> usize {
    let b = cfg.branch_channels;
    let mut total = 0;
    let mut c_in = cfg.in_channels;
    let (mut h, mut w) = (cfg.in_height, cfg.in_width);
    for i in 0..cfg.n_multiscale_blocks {
        total += 2 * (b * c_in * 3 + b) + 2 * (2 * b);
        if i == 0 {
            c_in = b;
            w *= 2;
        } else {
            c_in = 2 * b;
        }
        h /= cfg.pool.0;
        w /= cfg.pool.1;
    }
    let (f, k) = (cfg.final_channels, cfg.final_kernel);
    total += f * c_in * k * k + f + 2 * f;
    let d_f = h * w;
    total += f * d_f * cfg.head_hidden + cfg.head_hidden;
    total += cfg.head_hidden * cfg.n_classes + cfg.n_classes;
    if cfg.fusion == FusionMode::GlobalAware {
        total += 2 * d_f;
        total += d_f * 4 * d_f + 4 * d_f;
        total += f * f * cfg.gate_kernel + f;
        total += 2 * d_f * d_f + d_f;
    }
    total
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig {
            fusion: FusionMode::None,
            ..Default::default()
        },
        small(),
    ] {
        let p = ParameterSet::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(p.count(), closed_form_count(&cfg));
    }
}

#[test]
fn default_model_dimensions() {
    let plan = ModelConfig::default().shape_plan().unwrap();
    let cfg = ModelConfig::default();
    // three 2×2 pools on 198×(2·40) then the shape-preserving final conv
    let h = 198 / 2 / 2 / 2;
    let w = 40 * 2 / 2 / 2 / 2;
    assert_eq!(plan.d_model(), cfg.final_channels);
    assert_eq!(plan.d_f(), h * w);
}

#[test]
fn missing_running_stats_fail_in_eval() {
    let cfg = small();
    let params = ParameterSet::<f64>::init(&cfg, 0).unwrap();
    let bn: BTreeMap<String, BnState<f64>> = params
        .bn()
        .keys()
        .map(|k| (k.clone(), BnState::uninitialized()))
        .collect();
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &params, false);
    let x = g.leaf(random(&[1, 1, 8, 10], 1), false);
    let r = Glam::new(&cfg, &bound, &bn, Mode::Eval).forward(&mut g, x);
    assert!(matches!(r, Err(Error::State(_))));
}
