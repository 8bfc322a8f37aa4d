//! Finite-difference flow optimization (FDFO) for flow-matching models.
//!
//! The crate trains small conditional velocity networks on synthetic data,
//! samples them with a deterministic Euler solver or an overshoot-and-renoise
//! stochastic solver, and post-trains them against scalar rewards by pulling
//! the velocities of paired rollouts toward the higher-reward endpoint.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod plot;
pub mod posttrain;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod velocity;
pub mod verification;

pub use error::{Error, Result};
