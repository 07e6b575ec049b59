//! Finite-population mean-field control with controllable interaction
//! structure.
//!
//! The crate simulates `n` interacting agents whose pairwise interaction
//! intensities are themselves controls, on top of a fixed block-constant
//! interaction structure (a step kernel). It provides:
//!
//! * [`kernels`]: step kernels, analytic graphons, exact and heuristic cut norms.
//! * [`controls`]: closed-loop, randomized and n-player lifted controls.
//! * [`dynamics`]: the Euler–Maruyama particle integrator and cost evaluation.
//! * [`metrics`]: Wasserstein distances between empirical measures.
//! * [`experiments`]: numerical checks turned into pass/fail reports.
//! * [`cli`]: configuration files and the `gmfc` command line.

// negated comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controls;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod metrics;
pub mod rng;
pub mod svg;

pub use error::{Error, Result};
