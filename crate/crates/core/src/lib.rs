//! Simulation and nonparametric estimation for kinetic diffusions
//! `dX = Y dt`, `dY = b(X, Y) dt + σ(X, Y) dW` with `b = −(c y + ∇V)`.

pub mod binning;
pub mod density;
pub mod drift;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod quad;
pub mod rates;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
