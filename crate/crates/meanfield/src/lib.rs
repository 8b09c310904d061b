//! Simulation and analysis toolkit for discrete-time interacting particle
//! systems whose drift reads the gradient of a self-generated scalar field.
//!
//! The model: `N` particles in `R^d` evolve by
//!
//! ```text
//! X_{n+1}^i = A X_n^i + delta * f(grad eta_n(X_n^i), mu_n^N, X_n^i, eps_{n+1}^i) + B(eps_{n+1}^i)
//! ```
//!
//! where `mu_n^N` is the empirical measure of the particle positions and
//! `eta_n` is a probability density ("field") updated each step by a convex
//! combination of diffusion and a fresh deposit along the particles:
//!
//! ```text
//! eta_{n+1} = (1 - alpha) * (eta_n * P) + alpha * (mu_n^N * P')
//! ```
//!
//! (`*` is convolution with a Markov smoothing kernel). Two finite-`N`
//! schemes are provided — an exact field update and a particle-subsampled
//! field update — together with the deterministic measure/field flow they
//! approximate as `N` grows, exact and bounding Wasserstein-1 distances,
//! contraction/stability constants for the flow, and a set of reproducible
//! numerical experiments (convergence rates, propagation of chaos,
//! contraction, coupling audits, moment monitoring, concentration).
//!
//! Modules:
//! - [`kernels`]: smoothing kernel families, densities, gradients, sampling,
//!   analytic constants (Lipschitz, moments, exponential moments).
//! - [`field`]: weighted mixture fields, exact/sampled evolution, expansion
//!   reference, compaction, integral functionals.
//! - [`dynamics`]: particle ensembles, drift/noise specifications, one-step
//!   maps for both schemes and for the synchronously coupled pair.
//! - [`transport`]: Wasserstein-1 distances (exact 1-D, exact assignment,
//!   dyadic upper bound, Monte Carlo estimates).
//! - [`limit`]: the deterministic measure/field flow, fixed-point iteration.
//! - [`stability`]: contraction constants, admissible step sizes, moment
//!   conditions, convergence-rate exponents.
//! - [`experiments`]: end-to-end experiment drivers with CSV/JSON output.
//! - [`config`]: JSON run configuration with strict validation.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod field;
pub mod kernels;
pub mod limit;
pub mod quad;
pub mod rng;
pub mod stability;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
