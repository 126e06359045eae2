//! Prior-guided contrastive despeckling for ultrasound-style images.
//!
//! The crate covers the full pipeline: multiplicative speckle synthesis,
//! statistics-guided negative-region mining, a dual-branch shared-weight
//! transformer/CNN denoiser with reverse-mode autodiff in f64, pixel- and
//! instance-level contrastive losses with a FIFO memory bank, and a
//! training/evaluation/ablation harness with a CLI front end.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod figure;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
