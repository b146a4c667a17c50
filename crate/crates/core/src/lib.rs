//! Simulation of deep linear networks trained in the maximal update
//! scaling, at finite width and in the infinite-width limit.
//!
//! * [`finite`] trains width-`m` networks with a frozen Gaussian middle layer.
//! * [`limit`] runs the deterministic infinite-width dynamics.
//! * [`chain`] builds the loopless chain vectors that connect the two.
//! * [`multilayer`] generalizes both to deeper one-dimensional networks.
//! * [`harness`] drives reproducible experiments and writes CSV output.

pub mod chain;
pub mod data;
pub mod error;
pub mod finite;
pub mod harness;
pub mod limit;
pub mod multilayer;
pub mod numerics;

pub use error::{Error, Result};
