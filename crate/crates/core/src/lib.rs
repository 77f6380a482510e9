//! Nonparametric frequency response function (FRF) estimation for
//! closed-loop MIMO systems.
//!
//! The crate covers the whole identification chain:
//!
//! - [`sigproc`]: orthogonal random-phase multisine design, steady-state
//!   trimming and DFT extraction at the excited lines.
//! - [`classical`]: H1, arithmetic, logarithmic and joint input-output
//!   estimators over blocks of experiments.
//! - [`local`]: local polynomial and local rational (MISO, MIMO and
//!   joint input-output) estimators that work from a single experiment.
//! - [`matfun`]: complex eigendecomposition and matrix log/exp used by the
//!   logarithmic averaging estimator.
//! - [`plant`]: a flexible-joint serial manipulator simulator with
//!   cascade control, disturbances and analytic linearization.
//! - [`graybox`]: weighted log-error fitting of stiffness and damping
//!   parameters to a set of FRF estimates.
//! - [`metrics`]: amplitude and parameter bias measures.
//! - [`campaign`]: configuration-driven pipelines (simulate, estimate,
//!   fit, report) used by the `frfkit` binary.

pub mod campaign;
pub mod classical;
pub mod error;
pub mod frf;
pub mod fsio;
pub mod graybox;
pub mod linalg;
pub mod local;
pub mod matfun;
pub mod metrics;
pub mod plant;
pub mod seed;
pub mod sigproc;

pub use error::{Error, Result};
pub use frf::{Covariance, FrfEstimate, FrfLine, LineStatus};
pub use nalgebra::Complex;

/// Complex double.
pub type C64 = Complex<f64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
