//! Desk-scale laboratory for diffusion-guided adversarial state perturbations
//! against image-input reinforcement learning agents.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod defense;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod realism;
pub mod victim;

pub use error::{Error, Result};
pub use frame::Frame;
