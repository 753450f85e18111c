//! Naturalistic adversarial patches sampled from a diffusion model.
//!
//! A patch lives in the generation space of a diffusion model. Each
//! optimization step noises it to `t_start`, denoises it back with a few
//! deterministic strided steps (adversarial patch sampling, APS), decodes
//! it to pixels, renders it onto people under random physical transforms
//! and backpropagates the detector's confidence through the whole chain.
//! Attack strength is measured as mAP against the detector's own clean
//! predictions.

pub mod autograd;
pub mod config;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generator;
pub mod io;
pub mod kv;
pub mod nn;
pub mod objective;
pub mod optimizer;
pub mod optim;
pub mod render;
pub mod rng;
pub mod sparse;
pub mod sweep;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
