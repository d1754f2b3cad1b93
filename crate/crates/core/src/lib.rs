//! Global feature importance for tabular classifiers, read off the
//! counterfactual paths a random walk over features discovers when it
//! permutes columns until the model's predictions swap.
//!
//! The usual flow is [`pathgen::generate_paths`] against a
//! [`blackbox::Classifier`], then [`importance::build_transition_matrix`]
//! and one of the importance estimators. [`pipeline`] wires these together
//! with file loading and report generation.

pub mod blackbox;
pub mod error;
pub mod export;
pub mod featgraph;
pub mod importance;
pub mod metrics;
pub mod pathgen;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod simgen;
pub mod tabular;

pub use blackbox::{BlackBoxModel, Classifier, ForestConfig, RandomForest};
pub use error::{Error, Result};
pub use featgraph::{FeatureGraph, GraphMode};
pub use importance::{
    build_transition_matrix, importance_fraction, importance_stationary, ImportanceMethod, ImportanceVector,
    StationaryConfig, TransitionMatrix,
};
pub use pathgen::{generate_paths, CounterfactualPath, PathGenConfig, PathSet};
pub use policy::CounterfactualPolicy;
pub use tabular::{Dataset, LabelVector};
