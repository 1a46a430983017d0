//! Uncertainty-guided progressive GANs for paired image-to-image translation.
//!
//! A cascade of generators each predicts a per-pixel generalized Gaussian
//! residual model (mean, scale, shape). The standard deviation map of one
//! phase, normalized over the image, weights that phase's prediction to form
//! the attention feature consumed by the next phase.

pub mod cascade;
pub mod container;
pub mod degrade;
pub mod evaluate;
pub mod error;
pub mod ggd;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod harness;
pub mod provenance;
pub mod special;
pub mod trainer;

pub use error::{Error, Result};
pub use ggd::{BetaClamp, GgdPrediction};
