//! Posterior inference over low-dimensional prompt parameters of a black-box
//! classifier.
//!
//! Two access regimes are covered. With class probabilities observable, the
//! [`estimators`] module builds point estimates, CMA-ES ensembles and a
//! gradient-free variational posterior. With only labels observable, the
//! [`abc`] module runs rejection ABC and ABC-SMC. Every method produces a
//! [`PosteriorEnsemble`], which [`predictive`] turns into per-input class
//! distributions and [`uqeval`] scores on calibration, selective
//! classification and OOD detection.

pub mod abc;
pub mod blackbox;
pub mod cmaes;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod posterior;
pub mod predictive;
pub mod prompt_space;
pub mod rng;
pub mod uqeval;

pub use error::{Error, Result};
pub use posterior::{PosteriorEnsemble, Provenance, Trace};
pub use prompt_space::{make_projection, PriorSpec, ProjectionSpec};
