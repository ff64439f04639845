//! Text-guided image inpainting with cross-modal alignment.

pub mod data;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
