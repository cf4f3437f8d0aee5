//! Exact solvers for the Lee–Lin–Wahba (LLW) and Weston–Watkins (WW)
//! all-in-one linear multi-class SVMs.
//!
//! Both trainers run dual coordinate ascent and parallelize over classes:
//! LLW through an auxiliary mean vector that decouples the class columns,
//! WW through a round-robin pairing of classes in which every round touches
//! each weight vector at most once. The [`dist`] module runs the same
//! algorithms across processes over a small message-passing layer.

pub mod dataset;
pub mod dist;
pub mod error;
pub mod eval;
pub mod llw;
pub mod model;
pub mod ovr;
pub mod sched;
pub mod solver;
pub mod synth;
pub mod ww;

pub use dataset::{NormalizationMode, SparseDataset, SparseVector};
pub use error::{Error, Result};
pub use model::WeightMatrix;
pub use solver::{SolverConfig, TrainStats};
