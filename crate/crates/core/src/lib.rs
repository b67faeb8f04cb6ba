//! Distribution-free Bayesian analysis of randomized experiments.
//!
//! Posterior uncertainty about the data generating process is represented by
//! iid Exp(1) weights on the observed units. The crate provides exact and
//! bootstrap posterior moments for means, OLS projections and average
//! treatment effects, population CART under those weights, and Bayesian
//! forests for heterogeneous treatment effects.

pub mod ate;
pub mod cart;
pub mod data;
pub mod dgp;
pub mod error;
pub mod forest;
mod linalg;
pub mod linproj;

pub use data::{Arm, ExperimentTable};
pub use dgp::{PosteriorMoments, SeedSpec, WeightKind, WeightVector};
pub use error::{Error, ErrorFamily, Result};
pub use linalg::RANK_TOLERANCE;
