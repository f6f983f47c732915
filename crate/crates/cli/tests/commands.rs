use std::path::{Path, PathBuf};
use std::process::Command;

use glam_cli::cache::{sidecar_path, Sidecar};
use glam_cli::manifest::{parse_manifest, Emotion};
use glam_cli::{
    cmd_eval, cmd_features, cmd_train, generate_synth_dataset, CliError, EvalOptions, RunConfig,
    SharedArgs,
};
use glam_core::audio::{compute_mfcc, load_wav, write_wav_i16, MfccConfig};

const GLAM: &str = env!("CARGO_BIN_EXE_glam");

/// A config small enough for a training run to take a second or two.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "n_multiscale_blocks = 1\nbranch_channels = 4\nfinal_channels = 4\nfinal_kernel = 3\n\
         head_hidden = 8\nepochs = 1\nalpha = 0.0\nlr0 = 1e-3\n",
    )
    .unwrap();
    path
}

fn args(dir: &Path, manifest: &Path) -> SharedArgs {
    SharedArgs {
        config: Some(tiny_config(dir)),
        manifest: Some(manifest.to_path_buf()),
        out: Some(dir.join("out")),
        ..Default::default()
    }
}

#[test]
fn synth_writes_one_wav_per_manifest_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 25, 1).unwrap();
    let records = parse_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 100);
    let wavs = std::fs::read_dir(dir.path().join("wav")).unwrap().count();
    assert_eq!(wavs, 100);
    for e in Emotion::ALL {
        assert_eq!(records.iter().filter(|r| r.label == e).count(), 25);
    }
    assert!(records.iter().any(|r| r.scripted) && records.iter().any(|r| !r.scripted));
    for r in records.iter().take(8) {
        let clip = load_wav(&r.wav_path).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert!((2.0..=4.0).contains(&clip.duration_secs()));
    }
}

#[test]
fn synth_is_byte_identical_under_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_synth_dataset(a.path(), 2, 7).unwrap();
    generate_synth_dataset(b.path(), 2, 7).unwrap();
    generate_synth_dataset(c.path(), 2, 8).unwrap();
    for name in [
        "manifest.jsonl",
        "wav/angry_0000.wav",
        "wav/neutral_0001.wav",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let x = std::fs::read(a.path().join("wav/sad_0001.wav")).unwrap();
    assert_ne!(x, std::fs::read(c.path().join("wav/sad_0001.wav")).unwrap());
}

#[test]
fn zero_per_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_synth_dataset(dir.path(), 0, 0).is_err());
}

/// Mean MFCC vector of an utterance.
fn mean_mfcc(path: &Path, cfg: &MfccConfig) -> Vec<f64> {
    let m = compute_mfcc(&load_wav(path).unwrap(), cfg).unwrap();
    let mut mean = vec![0.0; m.coeffs];
    for row in m.data.chunks_exact(m.coeffs) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v as f64 / m.frames as f64;
        }
    }
    mean
}

#[test]
fn nearest_centroid_separates_synthetic_classes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 10, 3).unwrap();
    let records = parse_manifest(&manifest).unwrap();
    let cfg = MfccConfig::default();
    let feats: Vec<(usize, Vec<f64>)> = records
        .iter()
        .map(|r| (r.label.index(), mean_mfcc(&r.wav_path, &cfg)))
        .collect();
    // centroids from the first half, accuracy on the second
    let (train, test) = feats.split_at(feats.len() / 2);
    let mut centroids = vec![vec![0.0; cfg.n_mfcc]; 4];
    let mut counts = [0usize; 4];
    for (k, v) in train {
        counts[*k] += 1;
        for (c, x) in centroids[*k].iter_mut().zip(v) {
            *c += x;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|x| *x /= n as f64);
    }
    let correct = test
        .iter()
        .filter(|(k, v)| {
            let dist = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..4)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == *k
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}

fn write_manifest(dir: &Path, lines: &[(&str, &str, &str)]) -> PathBuf {
    let text: String = lines
        .iter()
        .map(|(id, wav, label)| {
            format!(
                "{{\"utterance_id\":\"{id}\",\"wav_path\":\"{wav}\",\"label\":\"{label}\",\"session\":\"S1\",\"scripted\":false}}\n"
            )
        })
        .collect();
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn four_second_utterance_gives_six_segments() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f32> = (0..64_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    write_wav_i16(dir.path().join("four.wav"), &samples, 16_000).unwrap();
    let manifest = write_manifest(dir.path(), &[("four", "four.wav", "sad")]);
    let report = cmd_features(&RunConfig::resolve(&args(dir.path(), &manifest)).unwrap()).unwrap();
    assert_eq!(report.segments_per_class, [0, 0, 6, 0]);
    let side: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(sidecar_path(&report.cache_dir, "four")).unwrap(),
    )
    .unwrap();
    assert_eq!(side.n_segments, 6);
    assert_eq!(side.label, Emotion::Sad);
}

#[test]
fn features_are_idempotent_and_invalidated_by_config_changes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 2, 0).unwrap();
    let a = args(dir.path(), &manifest);
    let cfg = RunConfig::resolve(&a).unwrap();
    let first = cmd_features(&cfg).unwrap();
    assert_eq!((first.extracted, first.reused), (8, 0));
    assert_eq!(first.cache_dir, dir.path().join("features"));
    let again = cmd_features(&cfg).unwrap();
    assert_eq!((again.extracted, again.reused), (0, 8));
    assert_eq!(again.segments_per_class, first.segments_per_class);

    let changed = dir.path().join("changed.toml");
    std::fs::write(&changed, "n_mfcc = 20\n").unwrap();
    let cfg2 = RunConfig::resolve(&SharedArgs {
        config: Some(changed),
        ..a.clone()
    })
    .unwrap();
    let third = cmd_features(&cfg2).unwrap();
    assert_eq!((third.extracted, third.reused), (8, 0));
}

#[test]
fn unreadable_audio_is_reported_per_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 1, 0).unwrap();
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str(
        "{\"utterance_id\":\"ghost\",\"wav_path\":\"missing.wav\",\"label\":\"happy\",\"session\":\"S1\",\"scripted\":false}\n",
    );
    std::fs::write(&manifest, text).unwrap();
    let report = cmd_features(&RunConfig::resolve(&args(dir.path(), &manifest)).unwrap()).unwrap();
    assert_eq!(report.extracted, 4);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, "ghost");

    let out = Command::new(GLAM)
        .args(["features", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 of 5"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing.wav"));
}

#[test]
fn training_without_cache_points_at_features() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 1, 0).unwrap();
    let err = cmd_train(
        &RunConfig::resolve(&args(dir.path(), &manifest)).unwrap(),
        &mut |_, _| {},
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("glam features"), "{err}");
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_test_wa() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 3, 5).unwrap();
    let mut a = args(dir.path(), &manifest);
    a.runs = Some(2);
    let cfg = RunConfig::resolve(&a).unwrap();
    cmd_features(&cfg).unwrap();
    let mut epochs = 0;
    let out = cmd_train(&cfg, &mut |_, _| epochs += 1).unwrap();
    assert_eq!(epochs, 2);
    assert_eq!(out.checkpoints.len(), 2);
    let csv = std::fs::read_to_string(&out.runs_csv).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("run_id,wa,ua,macro_f1,micro_f1\n"));
    assert!(out.summary_json.ends_with("summary_global_aware.json"));
    let od = dir.path().join("out");
    for f in [
        "run0_global_aware_confusion.json",
        "run1_global_aware_confusion.txt",
        "run1_global_aware_history.jsonl",
    ] {
        assert!(od.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(od.join("run0_global_aware_history.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "lr", "val_wa", "val_ua", "snapshot"] {
        assert!(rec.get(key).is_some(), "{key}");
    }

    for (i, ckpt) in out.checkpoints.iter().enumerate() {
        let res = cmd_eval(
            &cfg,
            &EvalOptions {
                checkpoint: ckpt.clone(),
                test_split: true,
                embeddings: Some(dir.path().join(format!("emb{i}.gtsr"))),
            },
        )
        .unwrap();
        assert_eq!(res.report.wa.to_bits(), out.runs[i].wa.to_bits());
        assert_eq!(res.report.wa.to_bits(), res.recorded.wa.to_bits());
        assert_eq!(res.report.ua.to_bits(), out.runs[i].ua.to_bits());
        let emb = glam_core::Tensor::<f32>::from_bytes(
            &std::fs::read(dir.path().join(format!("emb{i}.gtsr"))).unwrap(),
        )
        .unwrap();
        assert_eq!(emb.shape(), [res.n_segments, 8]);
    }

    let mut none = a.clone();
    none.fusion = Some(glam_core::model::FusionMode::None);
    let out_none = cmd_train(&RunConfig::resolve(&none).unwrap(), &mut |_, _| {}).unwrap();
    assert!(out_none.summary_json.ends_with("summary_none.json"));
    assert!(out.summary_json.is_file() && out_none.summary_json.is_file());
}

#[test]
fn ratio_split_trains_with_validation_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synth_dataset(dir.path(), 3, 6).unwrap();
    let mut a = args(dir.path(), &manifest);
    a.runs = Some(1);
    a.epochs = Some(2);
    a.split = Some(glam_core::metrics::SplitMode::Ratio811);
    let cfg = RunConfig::resolve(&a).unwrap();
    cmd_features(&cfg).unwrap();
    let mut snapshots = 0;
    cmd_train(&cfg, &mut |_, rec| {
        assert!(rec.val_wa.is_some() && rec.val_ua.is_some());
        snapshots += rec.snapshot as usize;
    })
    .unwrap();
    assert!(snapshots >= 1);
}

#[test]
fn binary_exit_codes_follow_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_manifest(dir.path(), &[("u1", "a.wav", "excited")]);
    let out = Command::new(GLAM)
        .args(["features", "--manifest"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("happy"));

    let out = Command::new(GLAM)
        .args(["train", "--manifest"])
        .arg(dir.path().join("absent.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = Command::new(GLAM)
        .args(["synth", "--per-class", "1", "--out"])
        .arg(dir.path().join("s"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("s/manifest.jsonl").is_file());
}

#[test]
fn gradcheck_command_reports_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(GLAM)
        .args(["gradcheck", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("conv2d_same") && text.contains("max_rel_err"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(
        json["cases"].as_array().unwrap().len(),
        text.lines().count() - 1
    );
}
