//! Null controllability of forward and backward stochastic parabolic
//! equations discretized on a binary scenario tree.

pub mod carleman;
pub mod error;
pub mod hum;
pub mod mesh;
pub mod oracle;
pub mod scenario;
pub mod seed;
pub mod semilinear;
pub mod spde;
pub mod weights;

pub use error::{Error, Result};
pub use mesh::{DiffusionOperator, SpatialField, SpatialMesh};
pub use scenario::{expectation, martingale_coefficient, AdaptedField, ScenarioTree};
pub use seed::seed_split;
