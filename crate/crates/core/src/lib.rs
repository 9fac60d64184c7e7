//! Markovian lifts of stochastic Volterra equations: kernel bases, finite approximations,
//! simulation, and ergodicity diagnostics.

// `!(x > 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod config;
pub mod coupling;
pub mod discretize;
pub mod dynamics;
pub mod ergodics;
pub mod error;
pub mod experiments;
pub mod kernelbasis;
pub mod linalg;
pub mod noise;
pub mod output;
pub mod quadrature;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
