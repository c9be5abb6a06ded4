//! Inverse optimal control for a planar two-link reaching model.
//!
//! The forward model is an Euler-transcribed optimal control problem whose
//! cost is a weighted sum of five basis functions. Weights are recovered
//! from observed joint trajectories either by a bilevel search around the
//! forward solver or by a single-level problem that replaces the inner
//! solve by its KKT conditions.

pub mod arm;
pub mod basis;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod ioc;
pub mod kkt;
pub mod ldl;
pub mod ocp;
pub mod solver;
pub mod sparse;
pub mod transcription;

pub use error::{Error, Result};
