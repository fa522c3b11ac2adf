//! Doob h-transform guidance for variance-preserving diffusion samplers.
//!
//! The reference distribution is a Gaussian mixture, so marginals, scores and
//! posteriors are closed-form. A weight `w` tilts the reference into a target
//! `q0 ∝ w·p0`; the sampler follows the reference time reversal plus the drift
//! correction `∇log h`, where `h` is either the exact conditional expectation
//! of `w` or a gradient-regularized regression estimate of it.

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod oracle;
pub mod quadrature;
pub mod reference;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod weights;

pub use error::{Error, Result};
pub use matching::{FeatureMap, HEstimator};
pub use oracle::{DoobOracle, OracleMode};
pub use reference::{GaussianMixture, SubspaceEmbedding};
pub use sampler::{SampleBatch, SamplerConfig};
pub use schedule::VpSchedule;
pub use weights::WeightSpec;
