//! Hierarchical conditional Gaussian Bayesian networks.
//!
//! The crate learns the joint distribution of grouped tabular data in three
//! stages: (1) cluster the row groups by their residual behaviour around a
//! pooled regression, producing a discrete cluster variable; (2) learn a
//! directed acyclic graph by BIC hill climbing, where nodes downstream of the
//! cluster variable carry linear mixed-effect local models; (3) answer
//! queries by likelihood-weighted sampling, with kernel density estimates
//! for credible intervals.

pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod infer;
pub mod models;
pub mod network;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
