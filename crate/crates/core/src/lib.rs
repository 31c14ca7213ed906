//! Differentiable Gabor structure extraction and a two-phase, self-enhancing
//! hair image generator at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`conv`] and [`autodiff`]: dense tensors, same-size
//!   convolution and a reverse-mode tape with explicit backward rules.
//! * [`structure`]: the oriented Gabor bank and the duplicated
//!   texture/orientation extraction layer.
//! * [`losses`]: pixel, adversarial, Gram/style, feature matching and texture
//!   losses plus the weighted generator objective.
//! * [`nn`]: U-Net generators, the patch discriminator, the fixed feature
//!   extractor, optimizers and checkpoints.
//! * [`data`]: procedural hair images, sketches and low-resolution inputs.
//! * [`pipeline`]: the staged training schedule, evaluation, and the
//!   gradient-check suite.

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
pub mod htx;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod structure;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
