//! Uncertainty-aware inpainting of 3D fiber-orientation fields.
//!
//! A coarse-to-fine conditional GAN predicts a masked `n^3` patch of
//! orientation vectors from its `(2n)^3` context together with a per-voxel
//! aleatoric log-variance. Evaluating the trained generator over a volume
//! yields localized wiring-complexity maps.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod gan;
pub mod gradcheck;
pub mod io;
pub mod phantom;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
