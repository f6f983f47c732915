//! Run configuration: defaults, then a flat TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use glam_core::audio::MfccConfig;
use glam_core::metrics::SplitMode;
use glam_core::model::{FusionMode, ModelConfig};
use glam_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};
use crate::manifest::DatasetFilter;

/// Every key accepted in a config file. All are optional.
///
/// ```toml
/// manifest = "data/manifest.jsonl"
/// out = "runs"
/// seed = 0
/// dataset = "improvisation"   # improvisation | script | full
/// fusion = "global_aware"     # global_aware | none
/// split = "holdout"           # holdout | ratio811
/// runs = 5
/// alpha = 0.5
/// epochs = 50
/// batch_size = 32
/// lr0 = 1e-4
/// lr_decay = 0.95
/// lr_floor = 1e-6
/// weight_decay = 1e-6
/// adam_beta1 = 0.9
/// adam_beta2 = 0.999
/// adam_eps = 1e-8
/// n_multiscale_blocks = 3
/// branch_channels = 16
/// final_channels = 32
/// final_kernel = 5
/// head_hidden = 64
/// gate_kernel = 3
/// sample_rate = 16000
/// window_len = 400
/// hop = 160
/// fft_size = 512
/// n_mels = 40
/// n_mfcc = 40
/// pre_emphasis = 0.97
/// segment_secs = 2.0
/// overlap_secs = 1.6
/// ```
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetFilter>,
    pub fusion: Option<FusionMode>,
    pub split: Option<SplitMode>,
    pub runs: Option<usize>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_floor: Option<f64>,
    pub weight_decay: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub n_multiscale_blocks: Option<usize>,
    pub branch_channels: Option<usize>,
    pub final_channels: Option<usize>,
    pub final_kernel: Option<usize>,
    pub head_hidden: Option<usize>,
    pub gate_kernel: Option<usize>,
    pub sample_rate: Option<u32>,
    pub window_len: Option<usize>,
    pub hop: Option<usize>,
    pub fft_size: Option<usize>,
    pub n_mels: Option<usize>,
    pub n_mfcc: Option<usize>,
    pub pre_emphasis: Option<f64>,
    pub segment_secs: Option<f64>,
    pub overlap_secs: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flags shared by `features`, `train` and `eval`. Flags win over the file.
#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct SharedArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines utterance manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetFilter>,
    /// global_aware or none.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// Mixup Beta parameter; 0 disables mixup.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// holdout or ratio811.
    #[arg(long)]
    pub split: Option<SplitMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub dataset: DatasetFilter,
    pub split: SplitMode,
    pub n_runs: usize,
    pub mfcc: MfccConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mfcc = MfccConfig::default();
        let model = ModelConfig {
            in_height: mfcc.segment_frames(),
            in_width: mfcc.n_mfcc,
            ..Default::default()
        };
        Self {
            manifest: None,
            out: PathBuf::from("runs"),
            seed: 0,
            dataset: DatasetFilter::Full,
            split: SplitMode::Holdout,
            n_runs: 5,
            mfcc,
            model,
            train: TrainConfig::default(),
        }
    }
}

macro_rules! set {
    ($($dst:expr => $src:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl RunConfig {
    /// Defaults, overlaid by the file named in `--config`, overlaid by flags.
    pub fn resolve(args: &SharedArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut cfg = Self::from_file(&file);
        if args.manifest.is_some() {
            cfg.manifest = args.manifest.clone();
        }
        set!(
            cfg.out => args.out,
            cfg.seed => args.seed,
            cfg.dataset => args.dataset,
            cfg.model.fusion => args.fusion,
            cfg.train.alpha => args.alpha,
            cfg.n_runs => args.runs,
            cfg.split => args.split,
            cfg.train.epochs => args.epochs,
        );
        cfg.finish()
    }

    pub fn from_file(f: &FileConfig) -> Self {
        let mut c = Self::default();
        if f.manifest.is_some() {
            c.manifest = f.manifest.clone();
        }
        set!(
            c.out => f.out,
            c.seed => f.seed,
            c.dataset => f.dataset,
            c.model.fusion => f.fusion,
            c.split => f.split,
            c.n_runs => f.runs,
            c.train.alpha => f.alpha,
            c.train.epochs => f.epochs,
            c.train.batch_size => f.batch_size,
            c.train.lr0 => f.lr0,
            c.train.lr_decay => f.lr_decay,
            c.train.lr_floor => f.lr_floor,
            c.train.weight_decay => f.weight_decay,
            c.train.betas.0 => f.adam_beta1,
            c.train.betas.1 => f.adam_beta2,
            c.train.adam_eps => f.adam_eps,
            c.model.n_multiscale_blocks => f.n_multiscale_blocks,
            c.model.branch_channels => f.branch_channels,
            c.model.final_channels => f.final_channels,
            c.model.final_kernel => f.final_kernel,
            c.model.head_hidden => f.head_hidden,
            c.model.gate_kernel => f.gate_kernel,
            c.mfcc.sample_rate => f.sample_rate,
            c.mfcc.window_len => f.window_len,
            c.mfcc.hop => f.hop,
            c.mfcc.fft_size => f.fft_size,
            c.mfcc.n_mels => f.n_mels,
            c.mfcc.n_mfcc => f.n_mfcc,
            c.mfcc.pre_emphasis => f.pre_emphasis,
            c.mfcc.segment_secs => f.segment_secs,
            c.mfcc.overlap_secs => f.overlap_secs,
        );
        c
    }

    /// Derives the model input size from the front end and validates.
    fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.mfcc.validate()?;
        self.model.in_height = self.mfcc.segment_frames();
        self.model.in_width = self.mfcc.n_mfcc;
        self.model.validate()?;
        self.train.validate()?;
        if self.n_runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        Ok(self)
    }

    /// The manifest path, which must exist.
    pub fn manifest_path(&self) -> Result<&Path> {
        let p = self.manifest.as_deref().ok_or_else(|| {
            CliError::Config("no manifest given (use --manifest or the config file)".into())
        })?;
        if !p.is_file() {
            return Err(CliError::Config(format!(
                "manifest {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_front_end() {
        let c = RunConfig::resolve(&SharedArgs::default()).unwrap();
        assert_eq!((c.model.in_height, c.model.in_width), (198, 40));
        assert_eq!(c.n_runs, 5);
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.dataset, DatasetFilter::Full);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 3\nalpha = 0.2\nruns = 2\nfusion = \"none\"\nmanifest = \"m.jsonl\"\nn_mfcc = 20\n",
        )
        .unwrap();
        let args = SharedArgs {
            config: Some(path),
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::resolve(&args).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.alpha, 0.2);
        assert_eq!(c.n_runs, 2);
        assert_eq!(c.model.fusion, FusionMode::None);
        assert_eq!(c.model.in_width, 20);
        assert_eq!(c.manifest, Some(dir.path().join("m.jsonl")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "learning_rate = 0.1\n").unwrap();
        let err = FileConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        let args = SharedArgs {
            alpha: Some(-1.0),
            ..Default::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
        let args = SharedArgs {
            runs: Some(0),
            ..Default::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let c = RunConfig::default();
        assert!(matches!(c.manifest_path(), Err(CliError::Config(_))));
    }
}
