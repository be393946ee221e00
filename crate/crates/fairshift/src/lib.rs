//! # fairshift
//!
//! Individual fairness and domain adaptation are two faces of the same
//! smoothness requirement: a model should not distinguish inputs that differ
//! only in uninformative ways. This crate implements both directions of that
//! bridge on linear and kernel-expansion models, at a scale where every
//! theoretical guarantee can be checked numerically:
//!
//! - **Fairness regularizers for distribution shift**: graph-Laplacian and
//!   transport-constrained adversarial regularizers attached to quadratic-loss
//!   risk minimization, with target-domain error bounds evaluated term by term
//!   ([`bounds`]).
//! - **Domain adaptation for fairness**: Sinkhorn-divergence alignment of
//!   linear representations across protected groups under a factor model,
//!   which provably removes the protected direction ([`alignment`]).
//!
//! Everything is deterministic given a seed: data generators, solvers,
//! adversaries, and alignment fits all derive their randomness from a
//! ChaCha8 stream so that experiment reports are byte-reproducible.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`data`] | datasets, synthetic generators, CSV I/O |
//! | [`kernel_graph`] | kernels, fair metrics, graph Laplacian, spectral constants |
//! | [`regularizers`] | empirical, population, and adversarial regularizers |
//! | [`solver`] | ERM and regularized/adversarial fits |
//! | [`extrapolation`] | smoothest extension of source outputs to target points |
//! | [`bounds`] | numerical evaluation of the error-bound inequalities |
//! | [`alignment`] | Sinkhorn divergence, representation alignment, consistency |
//! | [`metrics`] | balanced accuracy, group TNR, Lipschitz probes |

pub mod alignment;
pub mod bounds;
pub mod data;
pub mod error;
pub mod extrapolation;
pub mod gradcheck;
pub mod kernel_graph;
pub mod metrics;
pub mod regularizers;
pub mod seeding;
pub mod solver;

pub use error::{Error, Result};
