//! Semi-supervised image deraining with Gaussian-process pseudo-labels.
//!
//! A rainy image is modeled as a clean image plus an additive rain residue.
//! A small encoder/decoder predicts the residue; during training, latent
//! features of labeled images are stored in a bank, and a Gaussian process
//! over that bank manufactures pseudo-ground-truth (posterior mean) plus an
//! uncertainty (posterior covariance) for unlabeled images from a shifted
//! rain domain. A variance-weighted latent loss then adapts the encoder to
//! the unlabeled domain.
//!
//! The crate is organized as a library (see `examples/` for one runnable
//! example per capability) with a single thin `syn2real` binary exposing the
//! `synth`, `train`, `eval`, `derain` and `gp-inspect` subcommands.
//!
//! Everything runs on the CPU in `f64`, deterministically per seed.

pub mod cli;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rainsynth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
