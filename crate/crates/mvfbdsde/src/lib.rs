//! Particle solver and verification toolkit for fully coupled mean-field
//! forward-backward doubly stochastic differential equations.
//!
//! The canonical system carried by every solver routine is
//!
//! ```text
//! dy = f dt + g dW - z dB̄,        y(0) = x
//! dY = F dt + G dB̄ + Z dW,        Y(T) = h(y(T), law of y(T)) + ξ
//! ```
//!
//! where `dB̄` is a backward Itô integral and the coefficients may depend on
//! the law of the quadruple `(y, Y, z, Z)`.

pub mod assumptions;
pub mod control;
pub mod error;
pub mod measure;
pub mod model;
pub mod par;
pub mod paths;
pub mod regression;
pub mod solver;

pub use error::{Error, Result};
