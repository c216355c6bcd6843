//! Auditing human-annotated label datasets for cross-demographic consistency.
//!
//! The crate is organized as a pipeline:
//!
//! - [`dataset`] loads and filters annotation records, population strata and
//!   cultural index tables.
//! - [`glm`] is the frequentist logistic-regression core (IRLS, sandwich
//!   covariance, Wald tests) shared by the downstream analyses.
//! - [`bayes`] fits the hierarchical logistic model per (item, label) pair,
//!   either by Hamiltonian Monte Carlo or by a Laplace fast path.
//! - [`mrp`] turns posterior draws into poststratified estimates and
//!   consistency verdicts.
//! - [`culture`], [`matching`] and [`evaluate`] attribute and quantify
//!   inconsistency.
//! - [`synth`] generates datasets with a ground-truth manifest.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise. Results are
//! always collected in input order so output does not depend on the thread
//! count.

pub mod bayes;
pub mod culture;
pub mod dataset;
pub mod evaluate;
pub mod glm;
pub mod matching;
pub mod mrp;
pub mod par;
pub mod rng;
pub mod stats;
pub mod synth;

mod error;

pub use error::{Error, Result};

/// Toolkit version stamped into every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
