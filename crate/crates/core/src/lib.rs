//! Simulation and estimation toolkit for binary endpoints that are dichotomized
//! from an incomplete longitudinal continuous outcome.
//!
//! Two analysis pipelines are compared on the final-visit risk difference and
//! log odds ratio:
//!
//! * a marginal logistic model on the longitudinal binary panel
//!   ([`marginal`]), standardized over all subjects ([`estimands`]);
//! * multiple imputation of the continuous outcome ([`imputation`]) followed
//!   by a final-visit logistic fit and Rubin pooling.
//!
//! Data generation ([`datagen`]), monotone dropout ([`missingness`]) and the
//! replicate engine ([`harness`]) reproduce the simulation study around them.

pub mod datagen;
pub mod error;
pub mod estimands;
pub mod exec;
pub mod harness;
pub mod imputation;
pub mod linalg;
pub mod marginal;
pub mod missingness;
pub mod numfmt;
pub mod rng;
pub mod trial;

pub use error::{Error, Result};
