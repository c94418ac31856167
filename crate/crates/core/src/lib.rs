//! Spiking keyword-spotting network on raw audio: tensors with reverse-mode
//! differentiation, LIF/PLIF neurons, global-local spiking convolutions,
//! training, dataset loading and energy accounting.

pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod neurons;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{build_model, make_variant, Model, ModelConfig, Variant};
pub use tensor::{ParamId, Real, Tape, Tensor, Var};
