//! Temporal-logic fairness guards for spatio-temporal panel data.
//!
//! - [`stl`]: fairness specification language and its boolean semantics
//! - [`metrics`]: Pearson / Spearman / Kendall slices and bounded group loss
//! - [`trsolve`]: dogleg trust-region root finder
//! - [`decoder`]: fairness atoms compiled into residual systems and solved
//! - [`static_guard`]: per-partition adjustment of a panel under a guarded rule
//! - [`dynamic_guard`]: teacher-corrected training and guarded prediction
//! - [`persistence`]: persistence testing of adjusted panels
//! - [`dataio`]: panel container, ingestion, synthetic generator
//! - [`cli`]: the `fairguard` command-line driver

pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod dynamic_guard;
pub mod metrics;
pub mod persistence;
pub mod static_guard;
pub mod stl;
pub mod trsolve;
