//! Numerical laboratory for robust Gaussian covariance testing.
//!
//! The crate builds the covariance-matched contaminated mixtures that make
//! second-moment covariance testers blind, computes exact chi-squared inner
//! products between them, and measures how those inner products behave as
//! the number of samples grows.
//!
//! * [`matcore`]: dense symmetric matrices, Cholesky, spectral norms, traces.
//! * [`gauss`]: zero-mean Gaussians, exact and expanded chi-squared inner
//!   products, the total variation bound.
//! * [`ensemble`]: random perturbations and the contaminated mixture.
//! * [`experiments`]: tail curves and product-distribution estimates.
//! * [`testers`]: Frobenius and pairwise-kurtosis testers, power runs.
//! * [`harness`]: seeds, records, manifests and the command line.

pub mod ensemble;
pub mod experiments;
pub mod gauss;
pub mod harness;
pub mod matcore;
pub mod testers;

pub use ensemble::{ContaminatedModel, EnsembleConfig};
pub use gauss::{Chi2Value, SampleMatrix, ZeroMeanGaussian};
pub use harness::seed::{derive_stream, SeedSource, Stream};
pub use matcore::SymmetricMatrix;
