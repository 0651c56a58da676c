//! Springs-and-sticks learning machine: a damped stochastic lattice of sticks
//! pulled towards data points by springs, which fits a piecewise-linear model
//! by dissipating spring energy into a heat bath.

pub mod error;
pub mod experiments;
pub mod langevin;
pub mod lattice;
pub mod mechanics;
pub mod mlp;
pub mod stats;
pub mod thermo;
pub mod training;

pub use error::{Error, Result};
