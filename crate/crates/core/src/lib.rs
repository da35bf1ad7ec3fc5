//! Hierarchical, multi-area feedback-based optimization of distribution feeders.
//!
//! The crate is organised bottom-up:
//!
//! - [`feeder`]: multiphase radial feeder model, Z-bus power flow (the plant),
//!   measurements and finite-difference sensitivity models.
//! - [`hierarchy`]: control-area tree, DER/VDER specifications, cost
//!   aggregation and capacity sets.
//! - [`controller`]: the per-area local controller (dual ascent, regularized
//!   primal solve, PD augmentation, VDER low-pass filtering).
//! - [`stability`]: closed-loop certificate and equilibrium diagnostics.
//! - [`sim`]: deterministic closed-loop engine, logging and metrics.
//! - [`config`] and [`presets`]: TOML file formats and shipped scenarios.

pub mod config;
pub mod controller;
pub mod error;
pub mod feeder;
pub mod hierarchy;
pub mod presets;
pub mod sim;
pub mod stability;
pub mod synthetic;

pub use error::{Error, Result};

/// Power base used for per-unit residual checks (VA).
pub const POWER_BASE_VA: f64 = 1.0e6;
