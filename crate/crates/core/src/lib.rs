//! Mutual information estimation through vector copulas.
//!
//! The estimator learns each marginal with a flow-matched continuous flow,
//! turns the flow latents into element-wise ranks, fits a mixture of
//! Gaussian vector copulas to the joint ranks and reports the average log
//! copula density, which equals the mutual information in nats.

pub mod benchmarks;
pub mod copula;
pub mod critic;
pub mod error;
pub mod estimators;
pub mod flow;
pub mod linear;
pub mod nn;
pub mod ranks;

pub use error::{Error, Result};
