//! Dual-branch brain tumor segmentation: volumetric segmentation networks
//! whose output is gated by a per-slice region classifier.

pub mod config;
pub mod data_model;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nifti;
pub mod preprocess;
pub mod schedule;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
