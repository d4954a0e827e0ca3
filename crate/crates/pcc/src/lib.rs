//! Particle competition and cooperation classifiers for graph-based
//! semi-supervised learning, including the label-noise-robust variant,
//! diffusion baselines (LGC, LP), and a reproducible benchmark harness.
//!
//! - [`dataset`] — CSV loading, z-score normalization, Gaussian synthesis,
//!   labeled-subset sampling and label-noise injection
//! - [`graph`] — k-NN / threshold graph construction policies
//! - [`engine`] — the particle dynamics (PCC-1/2/3 and LNR-PCC)
//! - [`baselines`] — LGC and LP diffusion classifiers
//! - [`harness`] — noise sweeps, grid-search tuning, result tables

pub mod baselines;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;

pub use error::{Error, Result};
