//! File formats, run configuration and command drivers for the keypoint
//! transporter. The numerical work lives in `transporter-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ply;
pub mod report;

pub use error::{Error, Result};
