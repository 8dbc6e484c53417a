//! Inference engine for the TransNeXt vision backbone: pixel-focused and
//! aggregated attention, the convolutional GLU channel mixer, a fused
//! sliding-window attention kernel, the four-stage model with its weight
//! archive, and a parameter/FLOP accountant.

pub mod attention;
pub mod backbone;
pub mod conv_glu;
pub mod error;
pub mod kernel;
pub mod oracle;
pub mod pfa;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
