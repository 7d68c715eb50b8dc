//! Doubly robust counterfactual mean embeddings and permutation tests for
//! distributional treatment effects.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: kernel functions, Gram matrices and the median-heuristic bandwidth.
//! - [`propensity`]: ridge-stabilised logistic propensity model with clipping.
//! - [`cme`]: per-arm conditional mean embeddings by kernel ridge regression.
//! - [`statistics`]: plug-in and doubly robust embeddings, MMD statistics and
//!   their closed-form quadratic forms.
//! - [`matching`]: greedy propensity matching and whole-set fold splits.
//! - [`permutation`]: the cached-train / fresh-test permutation scheme and p-values.
//! - [`datagen`]: synthetic data-generating processes and counterfactual CSV ingestion.
//! - [`experiments`]: the experiment suites behind the `dr-cme` binary.
//!
//! Everything that loops over independent work items (Gram rows, replicates,
//! permuted evaluations, model bundles) goes through [`par`], which is backed
//! by rayon when the `parallel` feature is on and by plain iterators otherwise.

pub mod cme;
pub mod data;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod matching;
pub mod par;
pub mod permutation;
pub mod propensity;
pub mod rng;
pub mod statistics;

pub use data::{Arm, Dataset, PointSet, Standardizer};
pub use error::{Error, Result};

/// Dense column-major matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;
