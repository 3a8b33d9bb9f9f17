//! Federated learning security simulator.
//!
//! The crate is organised around the server-side round pipeline:
//!
//! * [`model`] and [`data`]: small differentiable models over flat parameter
//!   vectors, synthetic Gaussian-cluster datasets and Dirichlet non-IID splits.
//! * [`engine`]: the FedAvg/FedOpt round loop with a hook registry holding at
//!   most one attacker and one defender.
//! * [`attacks`]: Byzantine model poisoning, label flipping, model replacement
//!   and gradient-matching data reconstruction.
//! * [`defenses`]: before-, on- and after-aggregation defenses (Krum family,
//!   Foolsgold, clipping, robust statistics, RFA, CRFL, ...).
//!
//! Client-side local training runs on rayon when the `parallel` feature is
//! enabled (the default); without it every path runs sequentially and produces
//! identical results.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod engine;
mod error;
mod exec;
pub mod model;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Execution;
