use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{bn_specs, parameter_specs, ParameterSet};
use crate::autodiff::{BnState, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLAMCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    /// Trainable parameters followed by running statistics, in blob order.
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    pub step: u64,
    pub metadata: serde_json::Value,
}

fn running_names(layer: &str) -> (String, String) {
    (
        format!("{layer}.running_mean"),
        format!("{layer}.running_var"),
    )
}

impl<T: Element> Checkpoint<T> {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut entries = Vec::new();
        let mut blobs: Vec<Tensor<T>> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            blobs.push(t.clone());
        }
        for (layer, state) in self.params.bn() {
            let (Some(rm), Some(rv)) = (&state.running_mean, &state.running_var) else {
                return Err(Error::State(format!(
                    "{layer} has no running statistics to save"
                )));
            };
            let (mn, vn) = running_names(layer);
            for (name, v) in [(mn, rm), (vn, rv)] {
                entries.push(TensorEntry {
                    name,
                    shape: vec![v.len()],
                });
                blobs.push(Tensor::new(vec![v.len()], v.clone())?);
            }
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for b in &blobs {
            b.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads a checkpoint and checks every tensor against the shapes its
    /// config implies.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("checkpoint header truncated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

        let specs = parameter_specs(&header.config)?;
        let layers = bn_specs(&header.config)?;
        let mut expected: Vec<TensorEntry> = specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect();
        expected.sort_by(|a, b| a.name.cmp(&b.name));
        let mut sorted_layers = layers.clone();
        sorted_layers.sort();
        for (layer, c) in &sorted_layers {
            let (mn, vn) = running_names(layer);
            expected.push(TensorEntry {
                name: mn,
                shape: vec![*c],
            });
            expected.push(TensorEntry {
                name: vn,
                shape: vec![*c],
            });
        }
        if header.tensors != expected {
            let detail = header
                .tensors
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| {
                    format!(
                        "{} {:?} where {} {:?} was expected",
                        a.name, a.shape, b.name, b.shape
                    )
                })
                .unwrap_or_else(|| {
                    format!(
                        "{} tensors, expected {}",
                        header.tensors.len(),
                        expected.len()
                    )
                });
            return Err(Error::Shape(format!(
                "checkpoint does not match its config: {detail}"
            )));
        }

        let mut tensors = BTreeMap::new();
        let mut running = BTreeMap::new();
        for (i, entry) in header.tensors.iter().enumerate() {
            let t = Tensor::<T>::read_from(&mut r)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {} stored as {:?}, header says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            if i < specs.len() {
                tensors.insert(entry.name.clone(), t);
            } else {
                running.insert(entry.name.clone(), t.into_data());
            }
        }
        let decay = specs.iter().map(|s| (s.name.clone(), s.decay)).collect();
        let bn = layers
            .iter()
            .map(|(layer, _)| {
                let (mn, vn) = running_names(layer);
                (
                    layer.clone(),
                    BnState {
                        running_mean: running.remove(&mn),
                        running_var: running.remove(&vn),
                        momentum: BN_MOMENTUM,
                        eps: BN_EPS,
                    },
                )
            })
            .collect();
        Ok(Self {
            config: header.config,
            params: ParameterSet::from_parts(tensors, decay, bn),
            step: header.step,
            metadata: header.metadata,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}
