//! Two-stage Vision Transformer inference: a localization pass over a half-resolution
//! image with a confidence-gated early exit, followed by a focus pass that re-embeds
//! only the most attended region at full resolution and reuses the rest.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod focus;
pub mod image;
pub mod selftest;
pub mod tensor;
pub mod weights;

pub use config::{FocusMode, ModelConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use weights::WeightStore;
