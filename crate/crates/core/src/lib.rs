//! Differentiable predictive control for glucose regulation.
//!
//! A bounded MLP policy is trained by backpropagating a penalty-form control
//! objective through an unrolled closed-loop simulation of a linear plant,
//! then evaluated over long closed-loop runs with moving reference bands.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod closedloop;
pub mod config;
pub mod eval;
pub mod error;
pub mod io;
pub mod linalg;
pub mod plant;
pub mod policy;
pub mod scenarios;
pub mod trainer;

pub use error::{Error, Result};
