use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, ModelConfig};
use crate::autodiff::BnState;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±gain·sqrt(6 / fan_in)`; gain 1 is Kaiming for ReLU.
    KaimingUniform {
        fan_in: usize,
        gain: f64,
    },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies.
    pub decay: bool,
}

fn spec(name: String, shape: Vec<usize>, init: Init, decay: bool) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        init,
        decay,
    }
}

fn conv_specs(
    out: &mut Vec<ParamSpec>,
    name: &str,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) {
    out.push(spec(
        format!("{name}.weight"),
        vec![c_out, c_in, kh, kw],
        Init::KaimingUniform {
            fan_in: c_in * kh * kw,
            gain: 1.0,
        },
        true,
    ));
    out.push(spec(
        format!("{name}.bias"),
        vec![c_out],
        Init::Constant(0.0),
        true,
    ));
}

fn bn_param_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(spec(
        format!("{name}.gamma"),
        vec![c],
        Init::Constant(1.0),
        false,
    ));
    out.push(spec(
        format!("{name}.beta"),
        vec![c],
        Init::Constant(0.0),
        false,
    ));
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize, weight: Init) {
    out.push(spec(
        format!("{name}.weight"),
        vec![d_in, d_out],
        weight,
        true,
    ));
    out.push(spec(
        format!("{name}.bias"),
        vec![d_out],
        Init::Constant(0.0),
        true,
    ));
}

/// Every trainable parameter in initialization order. Fusion parameters come
/// last, so toggling fusion leaves all other initial values unchanged.
pub fn parameter_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let plan = cfg.shape_plan()?;
    let mut out = Vec::new();
    for (i, inp) in plan.block_inputs.iter().enumerate() {
        let b = cfg.branch_channels;
        conv_specs(&mut out, &format!("ms{i}.spatial"), b, inp.channels, 1, 3);
        bn_param_specs(&mut out, &format!("ms{i}.spatial_bn"), b);
        conv_specs(&mut out, &format!("ms{i}.temporal"), b, inp.channels, 3, 1);
        bn_param_specs(&mut out, &format!("ms{i}.temporal_bn"), b);
    }
    let last = plan.block_outputs.last().copied().unwrap_or(plan.input);
    let k = cfg.final_kernel;
    conv_specs(&mut out, "final", cfg.final_channels, last.channels, k, k);
    bn_param_specs(&mut out, "final_bn", cfg.final_channels);

    let (c, d_f) = (plan.d_model(), plan.d_f());
    linear_specs(
        &mut out,
        "head.hidden",
        c * d_f,
        cfg.head_hidden,
        Init::KaimingUniform {
            fan_in: c * d_f,
            gain: 1.0,
        },
    );
    linear_specs(
        &mut out,
        "head.out",
        cfg.head_hidden,
        cfg.n_classes,
        // bound 1/sqrt(fan_in)
        Init::KaimingUniform {
            fan_in: cfg.head_hidden,
            gain: 1.0 / 6f64.sqrt(),
        },
    );

    if cfg.fusion == FusionMode::GlobalAware {
        out.push(spec(
            "fusion.norm.gamma".into(),
            vec![d_f],
            Init::Constant(1.0),
            true,
        ));
        out.push(spec(
            "fusion.norm.beta".into(),
            vec![d_f],
            Init::Constant(0.0),
            true,
        ));
        linear_specs(
            &mut out,
            "fusion.proj_in",
            d_f,
            4 * d_f,
            Init::KaimingUniform {
                fan_in: d_f,
                gain: 1.0,
            },
        );
        // the gate is the constant 1 at init
        out.push(spec(
            "fusion.gate.weight".into(),
            vec![c, c, 1, cfg.gate_kernel],
            Init::Constant(0.0),
            true,
        ));
        out.push(spec(
            "fusion.gate.bias".into(),
            vec![c],
            Init::Constant(1.0),
            true,
        ));
        linear_specs(
            &mut out,
            "fusion.proj_out",
            2 * d_f,
            d_f,
            Init::Constant(0.0),
        );
    }
    Ok(out)
}

/// Batch-norm layers and their channel counts.
pub fn bn_specs(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for i in 0..cfg.n_multiscale_blocks {
        out.push((format!("ms{i}.spatial_bn"), cfg.branch_channels));
        out.push((format!("ms{i}.temporal_bn"), cfg.branch_channels));
    }
    out.push(("final_bn".into(), cfg.final_channels));
    Ok(out)
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    decay: BTreeMap<String, bool>,
    bn: BTreeMap<String, BnState<T>>,
}

impl<T: Element> ParameterSet<T> {
    /// Fresh parameters for `cfg`, bitwise reproducible for a given seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let mut decay = BTreeMap::new();
        for s in parameter_specs(cfg)? {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::KaimingUniform { fan_in, gain } => {
                    let bound = gain * (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                        .collect()
                }
                Init::Constant(v) => vec![T::from_f64_lossy(v); n],
            };
            tensors.insert(s.name.clone(), Tensor::new(s.shape, data)?);
            decay.insert(s.name, s.decay);
        }
        let bn = bn_specs(cfg)?
            .into_iter()
            .map(|(name, c)| (name, BnState::new(c)))
            .collect();
        Ok(Self { tensors, decay, bn })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn decays(&self, name: &str) -> bool {
        self.decay.get(name).copied().unwrap_or(true)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bn(&self) -> &BTreeMap<String, BnState<T>> {
        &self.bn
    }

    pub fn bn_state_mut(&mut self, name: &str) -> Result<&mut BnState<T>> {
        self.bn
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no batch-norm layer named {name}")))
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        let cast_vec = |v: &Option<Vec<T>>| {
            v.as_ref().map(|v| {
                v.iter()
                    .map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN)))
                    .collect()
            })
        };
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            decay: self.decay.clone(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BnState {
                            running_mean: cast_vec(&s.running_mean),
                            running_var: cast_vec(&s.running_var),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts(
        tensors: BTreeMap<String, Tensor<T>>,
        decay: BTreeMap<String, bool>,
        bn: BTreeMap<String, BnState<T>>,
    ) -> Self {
        Self { tensors, decay, bn }
    }
}
