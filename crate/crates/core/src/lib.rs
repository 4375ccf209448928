//! Transition path sampling with a learned bias force.

pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod systems;
pub mod training;

pub use error::{CoreError, Result};
