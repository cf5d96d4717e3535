//! Probabilistic 2-D trajectory prediction with chance-constrained reshaping.
//!
//! Future motion is represented as a distribution over the weights of a fixed
//! RBF time basis. A mixture density network predicts a mixture of matrix
//! normal distributions over those weights, and a constrained optimizer then
//! moves that prediction to the closest (in KL divergence) distribution whose
//! time-averaged collision probability against a continuous occupancy field
//! stays below a limit.
//!
//! Module map:
//!
//! - [`traj_core`]: RBF features, timed paths, ridge fitting.
//! - [`dist`]: matrix normal mixtures, projection to world space, KL.
//! - [`occupancy`]: occupancy grids and the continuous Hilbert field.
//! - [`quad_cost`]: Gauss-Hermite collision cost and its gradient.
//! - [`learner`]: the mixture density network and its training loop.
//! - [`optimizer`]: augmented-Lagrangian solve of the constrained problem.
//! - [`bench`]: simulated scenarios, metrics and baselines.

pub mod bench;
pub mod dist;
mod error;
pub mod kv;
pub mod lbfgs;
pub mod mlp;
pub mod learner;
pub mod occupancy;
pub mod optimizer;
pub mod quad_cost;
pub mod traj_core;

pub use error::{Error, Result};
