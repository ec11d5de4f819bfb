//! Causality-driven medication recommendation over longitudinal visit records.
//!
//! The pipeline, end to end:
//!
//! 1. [`ehr`] loads patient cohorts (visits of disease / procedure /
//!    medication codes) and drug-drug interaction tables.
//! 2. [`discovery`] learns a directed acyclic graph over all entities from
//!    visit-level binary data via greedy score-based search.
//! 3. [`effects`] quantifies disease->medication and procedure->medication
//!    effects with backdoor-adjusted standardization and bins them into
//!    discrete relation types.
//! 4. [`encoder`] turns a visit into a dense health-state vector using
//!    causal-role attention over homogeneous entity graphs plus a relational
//!    graph convolution over effect-typed bipartite graphs.
//! 5. [`recommender`] scores the medication vocabulary per visit with a
//!    recurrent state over the visit sequence and a sigmoid head.
//! 6. [`train`] fits everything with manual reverse-mode gradients
//!    ([`autodiff`]) under an interaction-penalized objective, and evaluates
//!    with bootstrap resampling.
//! 7. [`pipeline`] wires the stages together behind one config, with hashed,
//!    atomically written artifacts.
//!
//! [`synth`] provides seeded structural-causal-model cohorts with exact
//! effect oracles so every stage can be tested against ground truth.

pub mod autodiff;
pub mod discovery;
pub mod effects;
pub mod ehr;
pub mod encoder;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod recommender;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
