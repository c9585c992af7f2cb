//! Gated linear attention (GLA) as an in-context learner for linear regression
//! tasks whose weights drift according to a first-order autoregressive process.
//!
//! The crate is organized bottom-up:
//!
//! - [`task_gen`]: AR(1) weight paths, prompt sampling and exact weight covariances.
//! - [`constants`]: the scalars `D1..D4` and the effective covariance `Λ̃`, each in
//!   closed form and as a direct-summation reference.
//! - [`gla`]: forward computation of single- and multi-layer GLA.
//! - [`theory`]: the closed-form optimum, reduced population loss, gradient-flow
//!   vector field, PL constant and exact training/testing errors.
//! - [`training`]: gradient-flow integration, minibatch training and Monte Carlo
//!   error estimation.
//! - [`baselines`]: LMS and RLS adaptive filters on the same drifting stream.

pub mod baselines;
pub mod constants;
pub mod error;
pub mod gla;
pub mod linalg;
pub mod rng;
pub mod task_gen;
pub mod theory;
pub mod training;

pub use constants::{constant_set, effective_covariance, ConstantSet};
pub use error::{Error, Result};
pub use gla::{GlaParams, ReducedParams};

pub use task_gen::{Prompt, TaskConfig, WeightPath};
pub use theory::{InitConfig, TestConfig};
pub use training::{SgdConfig, Trajectory};


