//! Evidential multi-view classification.
//!
//! The pipeline extracts per-view features with small dense networks,
//! propagates them over adaptive-neighbor graphs, converts the fused
//! representations into non-negative Dirichlet evidence, conditions each
//! view on a shared consensus, and aggregates the conditioned evidence
//! with a selective view-level graph that prunes conflicting views.
//! Arithmetic-average and sequential pairwise-average baselines are
//! included for comparison, along with a conflict-injection harness for
//! robustness experiments.

pub mod cli;
pub mod config;
pub mod error;
pub mod evidence;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
