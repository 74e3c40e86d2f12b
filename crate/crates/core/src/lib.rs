//! Simulation of continuously monitored quantum systems: weak-measurement
//! trajectories, Hamiltonian replication of the measurement back-action,
//! feedback-modified arrow-of-time statistics, ensemble emulation of open
//! dynamics and a feedback-driven measurement engine.

pub mod arrow;
pub mod dynamics;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod measurement;
pub mod qstate;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
