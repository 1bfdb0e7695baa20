//! Facial beauty prediction from portrait photographs.
//!
//! The pipeline decomposes a face image into complementary channels
//! (RGB color, CIELAB a/b, a WLS-smoothed lightness base layer and its
//! detail residual), trains small convolutional regression networks on
//! those channels, and chains the trainings into a cascaded fine-tuning
//! schedule. Performance is measured as the Pearson correlation between
//! predicted and ground-truth scores.
//!
//! See the repository README for the CLI, file formats and experiment
//! configurations.

pub mod cli;
pub mod error;
pub mod imageproc;
pub mod net;
pub mod parallel;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
