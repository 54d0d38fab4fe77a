//! Desk-scale laboratory for replay-based continual learning under the
//! supersample protocol.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`rng`] — deterministic hierarchical random streams; every random
//!   decision in a run is addressed by a (seed, path) pair.
//! - [`numerics`] — binary relative entropy and its inversion, plug-in
//!   mutual information over discrete joint histograms, low-rank
//!   log-determinants, and the fast-rate constant constraints.
//! - [`tasks`] — sequential task construction: synthetic Gaussian tasks,
//!   IDX image ingestion, split-class sequencing, label noise, and the
//!   supersample bookkeeping (membership bits, buffer index sets).
//! - [`model`] — small differentiable classifiers (linear softmax,
//!   one-hidden-layer MLP) with exact analytic gradients.
//! - [`train`] — the replay-based continual learning driver: sequential
//!   task loop, replay mini-batching, SGD/SGLD/Adam steps, gradient
//!   covariance probes, and full loss-table evaluation.
//! - [`bounds`] — turns Monte-Carlo run collections into the measured
//!   generalization gap and every tractable bound on it.
//! - [`oracle`] — exact brute-force ground truth on tiny finite instances,
//!   used to validate both the hypothesis-based bounds and the plug-in
//!   estimators.

pub mod bounds;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod tasks;
pub mod train;

pub use bounds::{BoundReport, BoundSearchCfg, EstimationMode, RunSet};
pub use model::{Activation, LossKind, ModelKind, ModelSpec, Params};
pub use numerics::{JointHistogram, NumericsError};
pub use rng::RngStream;
pub use tasks::{BufferIndex, MembershipVectors, Sample, TaskSequence};
pub use train::{LossTable, OptimizerCfg, RunRecord};
