//! Simulation and verification lab for an infinite-measure-preserving tower
//! over the Von Neumann–Kakutani odometer: the staged construction, the
//! linked/unlinked particle processes of its Poisson suspension, d̄-distance
//! estimation and entropy estimators.

pub mod config;
pub mod construction;
pub mod dbar;
pub mod entropy;
pub mod error;
pub mod experiments;
pub mod kv;
pub mod lemma;
pub mod schedule;
pub mod seed;
pub mod stats;
pub mod suspension;
pub mod transport;
pub mod window;

pub use error::{Error, Result};
