//! Interpretable sleep-stage scoring with trainable Gabor kernels.
//!
//! The pipeline: EDF recordings are segmented into 30 s epochs
//! ([`edf`]); a single-epoch CNN whose first layer is a bank of trainable
//! Gabor kernels scores each epoch, and a bidirectional LSTM rescoring stage
//! looks at the four neighbouring epochs on each side ([`network`],
//! [`train`]). [`interpret`] turns gradients of the single-epoch network into
//! per-kernel, per-stage impact measures.

pub mod alloc;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod edf;
pub mod error;
pub mod gabor;
pub mod interpret;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod stage;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use stage::StageLabel;
pub use tensor::{Real, Tensor};
