//! Federated learning over first-order Takagi-Sugeno fuzzy neural networks.
//!
//! Every client runs a rule-masked fuzzy classifier drawn from a shared global
//! rule bank. Training alternates between a cooperation stage (local SGD plus
//! activation-weighted rule averaging) and an evolution stage that deactivates
//! weak rules per client, spawns rules for struggling clients and prunes rules
//! nobody uses.
//!
//! Module map:
//!
//! - [`fnn`]: domain types and the forward pass.
//! - [`grad`]: analytic gradients and a finite-difference oracle.
//! - [`trainer`]: local mini-batch SGD.
//! - [`federation`]: the server, rule cooperation and rule evolution.
//! - [`datakit`]: CSV loading, normalization, Dirichlet partitioning, noise, k-fold.
//! - [`harness`]: experiment runner, FedAvg baseline, metrics files.

pub mod datakit;
pub mod error;
pub mod federation;
pub mod fnn;
pub mod grad;
pub mod harness;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
