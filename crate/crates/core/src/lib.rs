//! LiDAR and camera fusion for semantic segmentation on polar grid maps.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod kitti_io;
pub mod labels;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod quantize;
pub mod synth;

pub use error::{Error, Result};
