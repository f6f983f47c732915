//! The GLAM network: multi-scale convolution blocks, a gated global-aware
//! fusion block and a small classification head.

mod checkpoint;
mod config;
mod glam;
mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{FeatureShape, FusionMode, ModelConfig, ShapePlan};
pub use glam::{
    export_embeddings, predict_logits, softmax_rows, BlockPosition, Bound, ForwardOutput, Glam,
    GlobalAwareNodes, EVAL_CHUNK,
};
pub use params::{bn_specs, parameter_specs, Init, ParamSpec, ParameterSet};

#[cfg(test)]
mod tests;
