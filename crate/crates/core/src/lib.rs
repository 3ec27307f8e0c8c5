//! Sparse variational Gaussian processes with a Poisson point process over
//! the inducing set.
//!
//! Instead of fixing the number of inducing points, a variational point
//! process `q(Z)` over a candidate set `Z*` is learned jointly with the GP.
//! A prior `p(Z) ∝ exp(-alpha |Z|^2)` penalises large sets, so training
//! settles on as many points as the data can support.
//!
//! Modules, bottom-up:
//!
//! - [`adgrad`]: reverse-mode differentiation over dense matrices.
//! - [`kernel`]: RBF-ARD covariance.
//! - [`gp`]: exact marginal likelihood and the collapsed/uncollapsed bounds.
//! - [`point_process`]: the point-process posterior, prior and their KL.
//! - [`estimators`]: score-function and Concrete gradient estimators.
//! - [`trainer`]: Adam and the three-phase training schedule.
//! - [`dgp`]: doubly-stochastic deep GP with per-layer point processes.
//! - [`data`]: datasets, synthetic generators, file formats and experiments.

pub mod adgrad;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod gp;
pub mod kernel;
pub mod point_process;
pub mod trainer;

pub use error::{Error, Result};
