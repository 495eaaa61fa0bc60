//! Polar grid projection and camera fusion of LiDAR scans.

mod frame;
mod fusion;
mod projection;

pub use self::frame::*;
pub use self::fusion::{
    attach_label_channels, cell_pixel, colorize, image_grid, sample_label_raster, ColorizeStats,
};
pub use self::projection::{
    backproject_predictions, grid_cell, scatter_to_points, spherical_project, FovSpec,
};
