use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    GlobalAware,
    None,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::GlobalAware => "global_aware",
            FusionMode::None => "none",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_aware" => Ok(FusionMode::GlobalAware),
            "none" => Ok(FusionMode::None),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected global_aware or none)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architectural hyper-parameters. Axis convention: height is time frames,
/// width is MFCC coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub n_multiscale_blocks: usize,
    pub branch_channels: usize,
    pub final_kernel: usize,
    pub final_channels: usize,
    pub pool: (usize, usize),
    pub fusion: FusionMode,
    pub head_hidden: usize,
    pub gate_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            in_channels: 1,
            in_height: 198,
            in_width: 40,
            n_multiscale_blocks: 3,
            branch_channels: 16,
            final_kernel: 5,
            final_channels: 32,
            pool: (2, 2),
            fusion: FusionMode::GlobalAware,
            head_hidden: 64,
            gate_kernel: 3,
        }
    }
}

/// Channel count and spatial size of an activation, batch axis excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: FeatureShape,
    /// Input of each multiscale block.
    pub block_inputs: Vec<FeatureShape>,
    /// Output of each multiscale block after pooling.
    pub block_outputs: Vec<FeatureShape>,
    /// Output of the final convolution; defines `C` and `d_f`.
    pub fusion: FeatureShape,
}

impl ShapePlan {
    /// Channel count entering the fusion block.
    pub fn d_model(&self) -> usize {
        self.fusion.channels
    }

    /// Flattened per-channel feature length entering the fusion block.
    pub fn d_f(&self) -> usize {
        self.fusion.height * self.fusion.width
    }
}

impl ModelConfig {
    pub fn shape_plan(&self) -> Result<ShapePlan> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if [
            self.in_channels,
            self.in_height,
            self.in_width,
            self.branch_channels,
        ]
        .contains(&0)
            || self.final_channels == 0
            || self.head_hidden == 0
        {
            return bad("sizes and channel counts must be positive".into());
        }
        if self.final_kernel % 2 == 0 || self.gate_kernel % 2 == 0 {
            return bad("final_kernel and gate_kernel must be odd".into());
        }
        let (ph, pw) = self.pool;
        if ph == 0 || pw == 0 {
            return bad("pool window must be positive".into());
        }
        let input = FeatureShape {
            channels: self.in_channels,
            height: self.in_height,
            width: self.in_width,
        };
        let mut cur = input;
        let mut block_inputs = Vec::new();
        let mut block_outputs = Vec::new();
        for b in 0..self.n_multiscale_blocks {
            block_inputs.push(cur);
            let (channels, width) = if b == 0 {
                (self.branch_channels, cur.width * 2)
            } else {
                (self.branch_channels * 2, cur.width)
            };
            if cur.height < ph || width < pw {
                return bad(format!(
                    "block {b}: {}x{width} map is smaller than the {ph}x{pw} pool",
                    cur.height
                ));
            }
            cur = FeatureShape {
                channels,
                height: cur.height / ph,
                width: width / pw,
            };
            block_outputs.push(cur);
        }
        let fusion = FeatureShape {
            channels: self.final_channels,
            ..cur
        };
        Ok(ShapePlan {
            input,
            block_inputs,
            block_outputs,
            fusion,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_plan().map(|_| ())
    }
}
