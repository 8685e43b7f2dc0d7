//! Learning Brownian dynamics of interacting particle systems from
//! trajectory data.
//!
//! The crate simulates overdamped Langevin (Brownian) dynamics of spring
//! systems, trains graph-network and baseline models on one-step transition
//! pairs with a Gaussian negative-log-likelihood objective, and evaluates
//! roll-out quality with position, Brownian and KL-divergence metrics.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod systems;

pub mod integrator;

pub mod models;

pub mod training;

pub mod evaluation;

pub mod io;

pub use error::{Error, Result};
