//! Building blocks for multi-scale, global-aware speech emotion recognition.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
