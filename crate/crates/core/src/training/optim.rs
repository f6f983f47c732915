use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::{Element, Tensor};

/// Adam moment buffers, one pair per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction. Decoupled weight decay
/// `p -= lr·wd·p` is applied first to every parameter that decays.
pub fn adam_step<T: Element>(
    params: &mut ParameterSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("no gradient for parameter {name}")))?;
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let step = T::from_f64_lossy(lr / c1);
    let inv_sqrt_c2 = T::from_f64_lossy(1.0 / c2.sqrt());
    let eps = T::from_f64_lossy(cfg.adam_eps);
    for name in &names {
        let decay = if params.decays(name) {
            T::from_f64_lossy(lr * cfg.weight_decay)
        } else {
            T::zero()
        };
        let g = grads[name].data();
        let n = g.len();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); n]);
        let p = params.get_mut(name)?.data_mut();
        for i in 0..n {
            p[i] = p[i] - decay * p[i];
            m[i] = b1t * m[i] + one_b1 * g[i];
            v[i] = b2t * v[i] + one_b2 * g[i] * g[i];
            p[i] = p[i] - step * m[i] / (v[i].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}
