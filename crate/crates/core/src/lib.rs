//! Structured channel pruning for CNN detectors.
//!
//! The crate is organised around a small computation-graph IR
//! ([`graph::ModelGraph`]) that every pass rewrites:
//!
//! - [`accounting`]: parameter, capacity and FLOPS reports.
//! - [`autodiff`]: a reverse-mode engine that runs graphs forward and backward.
//! - [`slimming`]: L1 penalty on BN scale factors, learning-rate schedules and
//!   the global |γ| ranking that produces a [`slimming::PruningPlan`].
//! - [`residual_matching`]: mask unification across residual groups and the
//!   rewrite that physically removes channels.
//! - [`branch_prune`]: fixed-rate width reduction for detection branches.
//! - [`distill`]: detection distillation losses.
//! - [`detection`]: anchors, matching and a synthetic shapes dataset.
//! - [`harness`]: configuration, training loops and the end-to-end pipeline.

pub mod accounting;
pub mod autodiff;
pub mod branch_prune;
pub mod data;
pub mod detection;
pub mod distill;
pub mod error;
pub mod graph;
pub mod harness;
pub mod params;
pub mod residual_matching;
pub mod slimming;

pub use error::{Error, Result, Violation};
