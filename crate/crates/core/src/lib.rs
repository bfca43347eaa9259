//! Generative modeling with forward-backward stochastic differential equations.
//!
//! A forward Ornstein–Uhlenbeck (or Brownian) state process is simulated with
//! the Euler scheme; two networks supply the initial value `Y₀` and the control
//! `Z` of a backward process whose terminal value `Y_T` is the generated sample.
//! Training matches the law of `Y_T` to image data under an unbiased MMD² loss,
//! differentiating through the whole rollout.

pub mod autodiff;
pub mod bsde;
pub mod data;
pub mod error;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod sde;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
