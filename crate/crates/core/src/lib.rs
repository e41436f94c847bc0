//! Omnidirectional image generation with an MLP-Mixer conditional GAN.
//!
//! The crate is self-contained: it ships its own reverse-mode tensor engine
//! (`tensor`), equirectangular projection toolkit (`geometry`), the mixer /
//! depthwise network blocks (`layers`), the generator and discriminator
//! (`generator`, `discriminator`), the loss suite (`losses`), the training
//! loop with checkpointing (`trainer`), analytic parameter/MAC accounting
//! (`analysis`), and a finite-difference verification harness (`gradcheck`).

pub mod analysis;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod params;
pub mod png_io;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
