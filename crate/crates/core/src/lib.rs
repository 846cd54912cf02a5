//! Synthetic LiDAR, BEV encoding, semantic CycleGAN training and detection
//! metrics.

pub mod bev;
pub mod config;
pub mod da;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod nets;
pub mod palette;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
