//! Numerical toolkit for diluted mean-field spin glasses.
//!
//! The crate builds truncated Ruelle probability cascades, the hierarchical
//! random fields that ride on their leaves, the clause models of diluted
//! K-spin and K-sat systems, and Monte Carlo estimators for the
//! Mézard-Parisi functional, the cascade averaging identity, the
//! tilt-and-resort invariance, the cavity equations and the
//! Ghirlanda-Guerra identities of finite systems.
//!
//! Every stochastic routine takes an explicit random stream (see [`rng`]) so
//! that ensembles are reproducible bit for bit regardless of how many worker
//! threads execute them.

pub mod cascade;
pub mod cavity;
pub mod clauses;
pub mod error;
pub mod fields;
pub mod finite_system;
pub mod mp_functional;
pub mod optimizer;
pub mod rng;
pub mod stats;

pub use cascade::{CascadeParams, TruncatedCascade, VertexPath};
pub use clauses::{ClauseInstance, ClauseModel, GDist};
pub use error::{Error, Result};
pub use fields::OrderParamH;
pub use stats::Estimate;
