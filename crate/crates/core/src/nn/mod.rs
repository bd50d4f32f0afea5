//! Tensor toolkit and velocity-field networks.
//!
//! Everything trains on `f64` with hand-written backward passes; there is no
//! autodiff framework underneath. [`array`] is the storage, [`layers`] the
//! differentiable blocks, [`params`] the optimizer state, [`model`] the two
//! velocity-field backbones, and [`checkpoint`] their on-disk form.

pub mod array;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;

pub use array::{ArrayError, NumArray};
pub use checkpoint::{load_model_file, save_model_file, CheckpointError};
pub use layers::{fourier_embed, Dense, Embedding, LayerError, LayerNorm};
pub use model::{Backbone, ModelCache, ModelConfig, ModelError, VelocityModel};
pub use params::{AdamConfig, ParamError, ParamId, ParamStore};
