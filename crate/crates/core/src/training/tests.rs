use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::FeatureMatrix;
use crate::model::FusionMode;

#[test]
fn lr_schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(0, &cfg), 1e-4);
    let mut expected = 1e-4;
    for _ in 0..10 {
        expected *= 0.95;
    }
    assert!((lr_at_epoch(10, &cfg) - expected).abs() < 1e-15);
    assert!((lr_at_epoch(10, &cfg) - 5.9874e-5).abs() < 1e-9);
    assert_eq!(lr_at_epoch(120, &cfg), 1e-6);
    let seq: Vec<f64> = (0..300).map(|e| lr_at_epoch(e, &cfg)).collect();
    assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    assert!(seq.iter().all(|&v| v >= cfg.lr_floor));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            alpha: -1.0,
            ..Default::default()
        },
        TrainConfig {
            lr_floor: 1.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 1,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert!(TrainConfig {
        batch_size: 1,
        alpha: 0.0,
        ..Default::default()
    }
    .validate()
    .is_ok());
}

fn moments(alpha: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n)
        .map(|_| sample_beta(alpha, &mut rng).unwrap())
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

#[test]
fn beta_one_is_uniform() {
    let (m, v) = moments(1.0, 100_000, 1);
    assert!((m - 0.5).abs() < 0.01);
    assert!((v - 1.0 / 12.0).abs() < 0.005);
}

#[test]
fn beta_half_moments() {
    let (m, v) = moments(0.5, 100_000, 2);
    assert!((m - 0.5).abs() < 0.01);
    // Var of Beta(a, a) is 1 / (4(2a + 1))
    assert!((v - 1.0 / (4.0 * 2.0)).abs() < 0.005);
}

#[test]
fn beta_is_seeded_and_checked() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| sample_beta(0.5, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert!(draw(3).iter().all(|&l| (0.0..=1.0).contains(&l)));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_beta(0.0, &mut rng), Err(Error::Config(_))));
    assert!(matches!(sample_beta(-2.0, &mut rng), Err(Error::Config(_))));
}

fn batch(b: usize, d: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(
        vec![b, d],
        (0..b * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
    (x, one_hot(&labels, 4).unwrap())
}

#[test]
fn mixup_endpoints() {
    let (x, y) = batch(5, 7, 1);
    let perm = [3, 0, 4, 1, 2];
    let (mx, my) = mixup_with(&x, &y, 1.0, &perm).unwrap();
    assert_eq!((mx, my), (x.clone(), y.clone()));

    let mut same = x.data().to_vec();
    same[7..14].copy_from_slice(&x.data()[..7]);
    let xs = Tensor::new(vec![5, 7], same).unwrap();
    let (mx, _) = mixup_with(&xs, &y, 0.37, &[1, 0, 2, 3, 4]).unwrap();
    assert_eq!(&mx.data()[..7], &xs.data()[..7]);
}

#[test]
fn mixup_rejects_bad_alpha_and_batch() {
    let (x, y) = batch(4, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        mixup_batch(&x, &y, 0.0, &mut rng),
        Err(Error::Config(_))
    ));
    let (x1, y1) = batch(1, 3, 2);
    assert!(mixup_batch(&x1, &y1, 0.5, &mut rng).is_err());
}

#[test]
fn mixed_labels_stay_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let (x, y) = batch(8, 5, i);
        let (_, my) = mixup_batch(&x, &y, 0.5, &mut rng).unwrap();
        for row in my.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn mixup_is_a_convex_combination(seed in 0u64..1000, alpha in 0.05f64..4.0) {
        let (x, y) = batch(6, 9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = sample_beta(alpha, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let (mx, my) = mixup_with(&x, &y, lambda, &perm).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            for c in 0..9 {
                let (a, b) = (x.data()[i * 9 + c], x.data()[j * 9 + c]);
                let v = mx.data()[i * 9 + c];
                prop_assert!(a.min(b) <= v && v <= a.max(b));
            }
            let s: f32 = my.data()[i * 4..(i + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

fn single_param(value: f32) -> ParameterSet<f32> {
    let mut tensors = BTreeMap::new();
    tensors.insert("w".to_string(), Tensor::new(vec![1], vec![value]).unwrap());
    let decay = [("w".to_string(), true)].into_iter().collect();
    ParameterSet::from_parts(tensors, decay, BTreeMap::new())
}

fn grad_of(g: f32) -> BTreeMap<String, Tensor<f32>> {
    [("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())]
        .into_iter()
        .collect()
}

#[test]
fn adam_first_step() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    for g in [0.5f32, -2.0, 1e-3] {
        let mut p = single_param(0.0);
        let mut st = AdamState::new();
        adam_step(&mut p, &grad_of(g), &mut st, 0.01, &cfg).unwrap();
        let got = p.get("w").unwrap().data()[0] as f64;
        let g = g as f64;
        let want = -0.01 * g / (g.abs() + 1e-8);
        assert!((got - want).abs() < 1e-9, "g={g}: {got} vs {want}");
        // the ε·sqrt(1-β2) form differs only in the ε term
        let alt = -0.01 * g / (g.abs() + 1e-8 * (1.0f64 - 0.999).sqrt());
        assert!((got - alt).abs() < 1e-4 * alt.abs());
        assert!((got + 0.01 * g.signum()).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }
}

#[test]
fn adam_fixed_point_and_zero_lr() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut p = single_param(1.5);
    let mut st = AdamState::new();
    adam_step(&mut p, &grad_of(0.0), &mut st, 0.1, &cfg).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 1.5);

    let decaying = TrainConfig {
        weight_decay: 0.5,
        ..Default::default()
    };
    adam_step(&mut p, &grad_of(3.0), &mut st, 0.0, &decaying).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    assert_eq!(st.t, 2);
}

#[test]
fn adam_minimizes_a_parabola() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut p = single_param(0.0);
    let mut st = AdamState::new();
    for _ in 0..200 {
        let w = p.get("w").unwrap().data()[0];
        adam_step(&mut p, &grad_of(2.0 * (w - 3.0)), &mut st, 0.1, &cfg).unwrap();
    }
    assert!((p.get("w").unwrap().data()[0] - 3.0).abs() < 0.05);
}

#[test]
fn adam_missing_gradient_names_parameter() {
    let mut p = single_param(0.0);
    let mut st = AdamState::new();
    match adam_step(
        &mut p,
        &BTreeMap::new(),
        &mut st,
        0.1,
        &TrainConfig::default(),
    ) {
        Err(Error::State(m)) => assert!(m.contains('w')),
        other => panic!("{other:?}"),
    }
    assert_eq!(st.t, 0);
}

#[test]
fn bn_parameters_skip_weight_decay() {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "bn.gamma".to_string(),
        Tensor::new(vec![1], vec![2.0f32]).unwrap(),
    );
    let decay = [("bn.gamma".to_string(), false)].into_iter().collect();
    let mut p = ParameterSet::from_parts(tensors, decay, BTreeMap::new());
    let grads = [(
        "bn.gamma".to_string(),
        Tensor::new(vec![1], vec![0.0]).unwrap(),
    )]
    .into_iter()
    .collect();
    let cfg = TrainConfig {
        weight_decay: 0.5,
        ..Default::default()
    };
    adam_step(&mut p, &grads, &mut AdamState::new(), 0.1, &cfg).unwrap();
    assert_eq!(p.get("bn.gamma").unwrap().data()[0], 2.0);
}

pub(crate) fn small_model() -> ModelConfig {
    ModelConfig {
        in_height: 8,
        in_width: 10,
        n_multiscale_blocks: 1,
        branch_channels: 4,
        final_channels: 4,
        final_kernel: 3,
        head_hidden: 16,
        ..Default::default()
    }
}

fn random_segments(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<FeatureSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, c) = (cfg.in_height, cfg.in_width);
    (0..n)
        .map(|i| FeatureSegment {
            features: FeatureMatrix {
                frames: f,
                coeffs: c,
                data: (0..f * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            utterance_id: format!("u{i}"),
            segment_index: 0,
            label: i % cfg.n_classes,
        })
        .collect()
}

fn accuracy(params: &ParameterSet<f32>, cfg: &ModelConfig, segs: &[FeatureSegment]) -> f64 {
    evaluate_segments(params, cfg, segs).unwrap().report.wa
}

#[test]
fn small_model_memorizes_random_segments() {
    let cfg = small_model();
    let segs = random_segments(32, &cfg, 5);
    let tc = TrainConfig {
        epochs: 150,
        alpha: 0.0,
        lr0: 3e-3,
        lr_decay: 1.0,
        ..Default::default()
    };
    let out = train(&cfg, &segs, None, &tc).unwrap();
    assert_eq!(accuracy(&out.params, &cfg, &segs), 1.0);
    assert_eq!(out.history.len(), 150);
    assert_eq!(out.steps, 150);
}

#[test]
fn initial_loss_is_near_chance() {
    let cfg = small_model();
    let segs = random_segments(64, &cfg, 6);
    let tc = TrainConfig {
        epochs: 1,
        alpha: 0.0,
        ..Default::default()
    };
    let out = train(&cfg, &segs, None, &tc).unwrap();
    assert!(
        (out.history[0].loss - 4f64.ln()).abs() < 0.15,
        "{}",
        out.history[0].loss
    );
}

#[test]
fn training_is_deterministic() {
    let cfg = small_model();
    let segs = random_segments(20, &cfg, 7);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    let a = train(&cfg, &segs, Some(&segs[..8]), &tc).unwrap();
    let b = train(&cfg, &segs, Some(&segs[..8]), &tc).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn snapshot_is_the_earliest_best_epoch() {
    let cfg = small_model();
    let segs = random_segments(24, &cfg, 8);
    let val = random_segments(12, &cfg, 9);
    let tc = TrainConfig {
        epochs: 12,
        batch_size: 8,
        lr0: 3e-3,
        ..Default::default()
    };
    let out = train(&cfg, &segs, Some(&val), &tc).unwrap();
    let scores: Vec<f64> = out
        .history
        .iter()
        .map(|r| (r.val_wa.unwrap() + r.val_ua.unwrap()) / 2.0)
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = scores.iter().position(|&s| s == best).unwrap();
    assert_eq!(out.best_epoch, Some(first));
    let report = evaluate_segments(&out.params, &cfg, &val).unwrap().report;
    assert_eq!(report.wa, out.history[first].val_wa.unwrap());
    assert!(out.history[first].snapshot);
}

#[test]
fn fusion_off_trains_too() {
    let cfg = ModelConfig {
        fusion: FusionMode::None,
        ..small_model()
    };
    let segs = random_segments(8, &cfg, 10);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    assert!(train(&cfg, &segs, None, &tc).is_ok());
}

#[test]
fn failure_modes() {
    let cfg = small_model();
    let tc = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    assert!(matches!(train(&cfg, &[], None, &tc), Err(Error::Config(_))));

    let mut segs = random_segments(4, &cfg, 11);
    segs[2].features.data[3] = f32::NAN;
    let tc = TrainConfig {
        epochs: 1,
        alpha: 0.0,
        ..Default::default()
    };
    let r = train(&cfg, &segs, None, &tc);
    assert!(
        matches!(r, Err(Error::Divergence { epoch: 0, step: 1 })),
        "{r:?}"
    );
}
