//! Unsupervised outlier detection with ensembles of variational Dirichlet
//! process Gaussian mixtures.
//!
//! Each ensemble member projects the training data onto a random orthonormal
//! subspace, subsamples rows, fits a truncated DP Gaussian mixture by
//! coordinate-ascent variational inference, drops low-weight mixture
//! components and thresholds the log-likelihood of its own training rows.
//! Test instances are flagged by majority vote across members.
//!
//! Module map:
//!
//! * [`math`]: special functions, Gaussian densities, quantiles.
//! * [`projection`]: random subspaces.
//! * [`dpgm`]: the variational mixture fit.
//! * [`ensemble`]: member construction, pruning, thresholds and voting.
//! * [`data`]: CSV ingestion, standardization, metrics and reports.

pub mod data;
pub mod dpgm;
pub mod ensemble;
pub mod error;
pub mod math;
pub mod projection;
pub mod seed;

pub use dpgm::CovarianceMode;
pub use ensemble::{DetectionReport, EnsembleComponent, EnsembleConfig, ThresholdRule};
pub use error::{ErrorKind, OedpmError, Result};
