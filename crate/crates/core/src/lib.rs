//! Mean-field solver for stochastic optimal control with quenched random couplings.
//!
//! A population of diffusing agents minimizes a quadratic control cost plus a
//! confining local potential, a separable terminal cost and random pairwise
//! interactions. In the large-population limit the problem reduces to a single
//! representative agent driven by two Gaussian random fields whose two-time
//! covariances must be determined self-consistently. This crate provides:
//!
//! - [`model`]: problem definition (potentials, terminal cost, grids),
//! - [`fields`]: two-time covariance kernels, PSD repair and field sampling,
//! - [`pde`]: the 1D backward weight-function solve, Cole-Hopf value function,
//!   optimal drift, forward Fokker-Planck propagation and a Feynman-Kac
//!   Monte Carlo cross-check,
//! - [`agent`]: reweighted observables of the representative agent,
//! - [`solver`]: the self-consistent kernel iteration and the optimal cost,
//! - [`oracle`]: finite-population ground truth (matrix Riccati for quadratic
//!   models, Feynman-Kac for general ones) with quenched disorder averages.

pub mod agent;
pub mod error;
pub mod fields;
pub mod model;
pub mod oracle;
pub mod pde;
pub mod seeds;
pub mod solver;

pub use error::{Error, Result};
