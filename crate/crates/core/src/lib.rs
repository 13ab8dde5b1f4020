//! Cross-scale reservoir computing for gridded spatiotemporal fields.
//!
//! The crate is organized bottom-up:
//!
//! - [`field`]: gridded series, masks, block coarse-graining, tiling, FGRID I/O
//! - [`reservoir`]: one leaky-tanh reservoir with a ridge-regression readout
//! - [`layer`]: a tiled set of reservoirs at one resolution
//! - [`hierarchy`]: coarse-to-fine stacks of layers, training, forecasting, checkpoints
//! - [`analysis`]: forecast error metrics, PCA filtering, linearization and modal analysis
//! - [`experiments`]: synthetic data, grid search and comparison protocols

pub mod analysis;
pub mod error;
pub mod experiments;
pub mod field;
pub mod fsutil;
pub mod hierarchy;
pub mod layer;
pub mod reservoir;
pub mod rng;

pub use error::{Error, Result};
