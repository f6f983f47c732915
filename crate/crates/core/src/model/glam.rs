use std::collections::BTreeMap;

use super::config::{FusionMode, ModelConfig};
use super::params::ParameterSet;
use crate::autodiff::{BatchStats, BnState, Graph, Mode, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Parameter names mapped to graph nodes.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Places every parameter on `g` as a leaf.
    pub fn bind<T: Element>(
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        requires_grad: bool,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Var)>,
        S: Into<String>,
    {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockPosition {
    /// Branches are joined along the coefficient axis.
    First,
    /// Branches are joined along channels.
    Rest,
}

/// Intermediate nodes of the global-aware block, all `(N·C)×…` except `out`.
#[derive(Debug, Clone, Copy)]
pub struct GlobalAwareNodes {
    pub u: Var,
    pub gate: Var,
    pub h: Var,
    /// `N×C×d_f`.
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    pub embeddings: Var,
    /// Batch statistics of every batch-norm layer, train mode only.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Wiring of the network over bound parameters. Eval mode reads the running
/// statistics in `bn`; train mode records batch statistics instead of
/// mutating anything.
pub struct Glam<'a, T> {
    pub cfg: &'a ModelConfig,
    pub bound: &'a Bound,
    pub bn: &'a BTreeMap<String, BnState<T>>,
    pub mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Element> Glam<'a, T> {
    pub fn new(
        cfg: &'a ModelConfig,
        bound: &'a Bound,
        bn: &'a BTreeMap<String, BnState<T>>,
        mode: Mode,
    ) -> Self {
        Self {
            cfg,
            bound,
            bn,
            mode,
            stats: Vec::new(),
        }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.bound.get(name)
    }

    fn batchnorm(&mut self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm2d_train(x, gamma, beta)?;
                self.stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let state = self
                    .bn
                    .get(name)
                    .ok_or_else(|| Error::State(format!("no running statistics for {name}")))?;
                g.batchnorm2d_eval(x, gamma, beta, state)
            }
        }
    }

    fn conv_bn_relu(&mut self, g: &mut Graph<T>, conv: &str, bn: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{conv}.weight"))?;
        let b = self.p(&format!("{conv}.bias"))?;
        let y = g.conv2d_same(x, w, b)?;
        let y = self.batchnorm(g, bn, y)?;
        Ok(g.relu(y))
    }

    /// Parallel 1×3 and 3×1 branches, concatenated, then max-pooled.
    pub fn multiscale_block(
        &mut self,
        g: &mut Graph<T>,
        index: usize,
        position: BlockPosition,
        x: Var,
    ) -> Result<Var> {
        let spatial = self.conv_bn_relu(
            g,
            &format!("ms{index}.spatial"),
            &format!("ms{index}.spatial_bn"),
            x,
        )?;
        let temporal = self.conv_bn_relu(
            g,
            &format!("ms{index}.temporal"),
            &format!("ms{index}.temporal_bn"),
            x,
        )?;
        let axis = match position {
            BlockPosition::First => 3,
            BlockPosition::Rest => 1,
        };
        let joined = g.concat(&[spatial, temporal], axis)?;
        g.maxpool2d(joined, self.cfg.pool)
    }

    pub fn final_conv(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.conv_bn_relu(g, "final", "final_bn", x)
    }

    /// Gated-MLP fusion over `x: N×C×d_f`.
    pub fn global_aware(&mut self, g: &mut Graph<T>, x: Var) -> Result<GlobalAwareNodes> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("global_aware: expected N×C×d_f, got {s:?}"));
        }
        let (n, c, d_f) = (s[0], s[1], s[2]);
        let gamma = self.p("fusion.norm.gamma")?;
        if g.shape(gamma) != [d_f] {
            return shape_err(format!(
                "global_aware: d_f is {d_f}, parameters expect {:?}",
                g.shape(gamma)
            ));
        }
        let flat = g.reshape(x, &[n * c, d_f])?;
        let u0 = g.layer_norm(flat, gamma, self.p("fusion.norm.beta")?)?;
        let z = g.linear(
            u0,
            self.p("fusion.proj_in.weight")?,
            self.p("fusion.proj_in.bias")?,
        )?;
        let z = g.gelu(z);
        let (u, v) = g.split_half(z, 1)?;
        let half = 2 * d_f;
        let v = g.reshape(v, &[n, c, 1, half])?;
        let gate = g.conv2d_same(
            v,
            self.p("fusion.gate.weight")?,
            self.p("fusion.gate.bias")?,
        )?;
        let gate = g.reshape(gate, &[n * c, half])?;
        let h = g.mul(u, gate)?;
        let proj = g.linear(
            h,
            self.p("fusion.proj_out.weight")?,
            self.p("fusion.proj_out.bias")?,
        )?;
        let sum = g.add(flat, proj)?;
        let out = g.reshape(sum, &[n, c, d_f])?;
        Ok(GlobalAwareNodes { u, gate, h, out })
    }

    /// Full network on `x: N×in_channels×in_height×in_width`.
    pub fn forward(mut self, g: &mut Graph<T>, x: Var) -> Result<ForwardOutput<T>> {
        let cfg = self.cfg;
        let s = g.shape(x).to_vec();
        let want = [cfg.in_channels, cfg.in_height, cfg.in_width];
        if s.len() != 4 || s[1..] != want {
            return shape_err(format!(
                "glam_forward: input {s:?} does not match N×{}×{}×{}",
                want[0], want[1], want[2]
            ));
        }
        let n = s[0];
        let mut h = x;
        for i in 0..cfg.n_multiscale_blocks {
            let pos = if i == 0 {
                BlockPosition::First
            } else {
                BlockPosition::Rest
            };
            h = self.multiscale_block(g, i, pos, h)?;
        }
        h = self.final_conv(g, h)?;
        let fs = g.shape(h).to_vec();
        let (c, d_f) = (fs[1], fs[2] * fs[3]);
        h = g.reshape(h, &[n, c, d_f])?;
        if cfg.fusion == FusionMode::GlobalAware {
            h = self.global_aware(g, h)?.out;
        }
        let flat = g.reshape(h, &[n, c * d_f])?;
        let hidden = g.linear(
            flat,
            self.p("head.hidden.weight")?,
            self.p("head.hidden.bias")?,
        )?;
        let embeddings = g.relu(hidden);
        let logits = g.linear(
            embeddings,
            self.p("head.out.weight")?,
            self.p("head.out.bias")?,
        )?;
        Ok(ForwardOutput {
            logits,
            embeddings,
            bn_stats: self.stats,
        })
    }
}

/// Eval-mode samples are processed in chunks of this many to bound memory.
pub const EVAL_CHUNK: usize = 64;

fn eval_chunks<T: Element>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    pick: impl Fn(&ForwardOutput<T>) -> Var,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return shape_err(format!("expected a rank-4 batch, got {s:?}"));
    }
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::new();
    let mut width = 0;
    for chunk in x.data().chunks(EVAL_CHUNK * per) {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, params, false);
        let input = g.leaf(
            Tensor::new(vec![chunk.len() / per, s[1], s[2], s[3]], chunk.to_vec())?,
            false,
        );
        let fo = Glam::new(cfg, &bound, params.bn(), Mode::Eval).forward(&mut g, input)?;
        let v = g.value(pick(&fo));
        width = v.shape()[1];
        out.extend_from_slice(v.data());
    }
    Tensor::new(vec![s[0], width], out)
}

/// Eval-mode logits `N×n_classes`.
pub fn predict_logits<T: Element>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    eval_chunks(params, cfg, x, |fo| fo.logits)
}

/// Penultimate activations `N×head_hidden`, for external visualization.
pub fn export_embeddings<T: Element>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    eval_chunks(params, cfg, x, |fo| fo.embeddings)
}

/// Row-wise softmax of `N×K` logits, computed in f64.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}
