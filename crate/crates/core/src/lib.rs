//! Learning generalized Nash equilibria of games with hidden objectives from
//! pairwise preference queries.
//!
//! The learner fits quadratic surrogate objectives as preference classifiers
//! and alternates between querying agents at the equilibrium of an
//! exploration-augmented surrogate game and retraining the surrogates.

pub mod active;
pub mod error;
pub mod game;
pub mod gne;
pub mod lqr;
pub mod optim;
pub mod preference;
pub mod qp;
pub mod quadratic;
mod serde_util;

pub use error::{Error, Result};
pub use game::{
    make_preference_oracle, AffineConstraints, AgentLayout, BoxSet, ConstrainedGame, FnOracle, ObjectiveFn,
    PreferenceDataset, PreferenceOracle, PreferenceSample, DEFAULT_TOL_EQ,
};
pub use quadratic::QuadraticAgentObjective;
