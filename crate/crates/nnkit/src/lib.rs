//! Minimal multilayer perceptrons with hand-written backpropagation.
//!
//! Every network in the lab (denoiser, Q-network, autoencoder) is a stack of
//! dense layers. [`Mlp::backward`] returns gradients with respect to both the
//! parameters and the input batch, which is what adversarial guidance needs.

mod checkpoint;
mod error;
mod mlp;
mod optim;

pub use checkpoint::{
    config_hash, decode, encode, load_model, save_model, Metadata, FORMAT_VERSION,
};
pub use error::{NnError, Result};
pub use mlp::{
    grad, Activation, Architecture, Dense, DenseGrad, Gradients, LayerSpec, Mlp, ParamGrads, Tape,
};
pub use optim::{Adam, AdamConfig};
