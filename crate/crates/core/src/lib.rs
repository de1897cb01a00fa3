//! Synthetic confounding benchmark for double machine learning.
//!
//! A structural causal model with two latent confounders generates a
//! freelancer-style labor-market sample. The latents are hidden from every
//! estimator but leak into simulated profile embeddings, so that how much of
//! the confounding a nuisance learner can remove depends on how well it
//! extracts the latent signal from a smooth high-dimensional manifold.
//!
//! * [`datagen`]: structural model, ground truth and CSV persistence
//! * [`textproxy`]: embedding simulator, PCA and polynomial expansion
//! * [`learners`]: linear, tree, boosting and MLP regressors
//! * [`dml`]: naive, OLS and cross-fitted partially linear estimators
//! * [`bench`]: multi-seed experiments and report files

pub mod bench;
pub mod datagen;
pub mod dml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod stats;
pub mod textproxy;

pub use datagen::{generate, Dataset, FeatureSet, Sector, StructuralConfig};
pub use dml::{DmlEstimate, NuisancePair};
pub use error::{Error, ErrorKind, Result};
pub use learners::{FittedModel, LearnerKind, LearnerSpec};
pub use par::Execution;
