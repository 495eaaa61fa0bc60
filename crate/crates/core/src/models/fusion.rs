use super::{Model, ModelKind};
use crate::error::{Error, Result};
use crate::geometry::{attach_label_channels, sample_label_raster, PgmFrame, RGB_CHANNELS};
use crate::kitti_io::{CalibrationSet, LabelRaster};
use crate::labels::{NUM_CLASSES, NUM_SCORED};

/// Builds the 10-channel late-fusion frame: `l2` from the LiDAR model,
/// `l1` from the camera side.
pub fn late_fusion_prepare(frame: &PgmFrame, lidar: &Model, l1: &[u32]) -> Result<PgmFrame> {
    if lidar.kind != ModelKind::Lidar {
        return Err(Error::contract(format!(
            "late fusion needs a lidar checkpoint, got {}",
            lidar.kind
        )));
    }
    if frame.c != RGB_CHANNELS {
        return Err(Error::contract(format!(
            "late fusion expects colorized {RGB_CHANNELS}-channel frames, got {}",
            frame.c
        )));
    }
    if let Some(&bad) = l1.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(Error::contract(format!("l1 class {bad} out of range")));
    }
    let l2 = lidar.infer(frame)?;
    attach_label_channels(frame, l1, &l2, NUM_SCORED)
}

/// `l1` from an externally produced camera label map in the reduced class
/// space.
pub fn l1_from_label_raster(frame: &PgmFrame, labels: &LabelRaster, calib: &CalibrationSet) -> Vec<u32> {
    sample_label_raster(frame, labels, calib)
}

/// `l1` from the camera-only model.
pub fn l1_from_image_model(model: &Model, frame: &PgmFrame) -> Result<Vec<u32>> {
    if model.kind != ModelKind::Image {
        return Err(Error::contract(format!("expected an image checkpoint, got {}", model.kind)));
    }
    model.infer(frame)
}
