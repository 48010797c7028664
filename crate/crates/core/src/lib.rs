//! Adversarial training as bi-level optimization.
//!
//! The lower level is a linearized attack with a closed-form solution over an
//! `ℓ∞` box; the upper level trains with implicit gradients derived from the
//! lower level's KKT conditions. Baselines, evaluation metrics and a suite of
//! finite-difference and brute-force oracles sit alongside.

pub mod attacks;
pub mod autodiff;
pub mod cg;
pub mod cli;
pub mod config;
pub mod constraints;
pub mod data;
pub mod error;
pub mod eval;
pub mod implicit_grad;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
