//! Geometry-guided two-stream token fusion with a synthetic multi-view
//! waypoint-navigation harness.
//!
//! The crate has three layers:
//!
//! * numeric core — [`tensor`] (dense f64 matrices with explicit backward
//!   rules and a finite-difference oracle) and [`fusion`] (the prior
//!   injection + cross-attention + gated fusion mechanism and its ablation
//!   variants);
//! * harness — [`world`] (procedural scenes and stand-in encoders),
//!   [`policy`] (waypoint head and trajectory loss), [`episode`]
//!   (closed-loop rollouts), [`train`] (supervised training with scheduled
//!   sampling), [`metrics`] (NE/SR/OSR/SPL, DTW family, smoothness);
//! * interface — [`config`], [`io`] (versioned text formats), and
//!   [`commands`] (the CLI entry points).
//!
//! Episode evaluation, finite-difference probes, and sweep cells run
//! data-parallel through [`par`] when the default `parallel` feature is
//! on; results are collected in input order, so outputs are identical
//! with and without it.

pub mod commands;
pub mod config;
pub mod episode;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
