//! Image-free multimodal machine translation.
//!
//! Trains a transformer translation model whose encoder fuses the
//! source text with a multimodal feature generated from the text
//! itself. During training a frozen convolutional teacher looking at
//! the real image supervises a student network that inverts the
//! generated feature back to image space; at inference no image is
//! needed anywhere.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
