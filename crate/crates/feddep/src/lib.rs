//! Subgraph federated learning with deep private neighbor generation.
//!
//! A simulator and library that partitions a global graph across in-process
//! clients, trains a joint model of a deep-neighbor generator and an
//! embedding-fused graph classifier under pseudo-FL, and computes closed-form
//! noise-free edge-LDP budgets for the training procedure.

pub mod error;
pub mod dgen;
pub mod fed;
pub mod gnn;
pub mod graph;
pub mod nn;
pub mod privacy;
pub mod proto;
pub mod synthetic;

pub use error::{Error, Result};
