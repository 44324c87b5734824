//! Joint per-layer bit-width and adapter-rank search under a hard memory
//! budget.
//!
//! The pipeline runs in two phases. [`phase1`] is a multi-fidelity
//! evolutionary search (successive halving with a robust screening
//! surrogate, constrained NSGA-II survival, hypervolume-based stopping) that
//! returns a measured feasible Pareto archive. [`phase2`] refines a single
//! operating point with a Gaussian-process surrogate over discrete trust
//! regions and expected improvement. Every candidate is projected into the
//! budget by [`feasibility::repair`] and scored through an
//! [`evaluator::Evaluator`] that caches results in a persistent ledger.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod feasibility;
pub mod importance;
pub mod manifest;
pub mod phase1;
pub mod phase2;
pub mod pipeline;
pub mod problem;
pub mod reports;
pub mod rng;
pub mod space;
pub mod stats;

pub use error::{Error, Result};
