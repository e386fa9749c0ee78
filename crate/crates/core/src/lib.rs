//! Byzantine-resilient decentralized SGD at desk scale.
//!
//! This crate simulates synchronous decentralized SGD over a peer-to-peer
//! graph in which some agents are Byzantine (send arbitrary malicious
//! messages), and provides the robust aggregation rules, attack models, and
//! analysis machinery needed to study how the attacks affect consensus,
//! algorithmic stability, and the generalization gap of the honest agents'
//! average model.
//!
//! Layout:
//!
//! * [`topology`] — communication graphs, Byzantine role assignment, mixing
//!   matrices and their spectral quantities, empirical contraction estimates.
//! * [`aggregation`] — weighted mean, coordinate-wise trimmed mean, iterative
//!   outlier scissor (IOS) and self-centered clipping (SCC).
//! * [`attacks`] — Gaussian, sample-duplicating, ALIE, and sign-flipping
//!   Byzantine message generators.
//! * [`learner`] — losses (regularized/plain softmax regression, tanh MLP),
//!   gradients, synthetic and IDX datasets, step-size schedules.
//! * [`engine`] — the synchronous training loop, paired stability runs with
//!   shared randomness, and parameter sweeps.
//! * [`analysis`] — generalization-gap estimates, consensus-constant fits,
//!   growth-model fits, and closed-form generalization bound evaluators.
//!
//! All numeric code is generic over [`Scalar`] (implemented for `f32` and
//! `f64`); [`Real`] is the default concrete choice.

pub mod aggregation;
pub mod analysis;
pub mod attacks;
pub mod engine;
pub mod error;
pub mod learner;
pub mod rng;
pub mod scalar;
pub mod topology;
pub mod vector;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use vector::ParamVector;

/// Default scalar type used by the CLI and most callers.
pub type Real = f64;

/// [`ParamVector`] over the default scalar.
pub type RealVector = ParamVector<Real>;
