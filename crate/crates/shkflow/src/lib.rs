//! Deterministic solver and certificate toolkit for birth-death Langevin
//! (spherical Hellinger-Kantorovich) gradient flows on the circle.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`] - periodic midpoint grid, quadrature, and spectral derivatives;
//! * [`potentials`] - trigonometric/tabulated potentials and Gibbs targets;
//! * [`flow`] - the transport-reaction PDE solver (RK4, finite-volume flux);
//! * [`divergence`] - KL, Renyi, total variation, hockey-stick divergences;
//! * [`bounds`] - log-ratio envelopes, KL bounds, and rate decompositions;
//! * [`privacy`] - exponential-mechanism losses and DP certificates;
//! * [`experiments`] - the built-in experiment suite (EXP1A..EXP4);
//! * [`cli`] - the command-line front end.
//!
//! Everything is deterministic: summations run left to right, no
//! parallelism touches floating-point reduction order, and the one random
//! dataset generator is a counter-based generator seeded from the config.

pub mod bounds;
pub mod cli;
pub mod divergence;
mod error;
pub mod experiments;
pub mod flow;
pub mod grid;
pub mod potentials;
pub mod privacy;

pub use error::{Error, Result};
