use super::frame::{PgmFrame, CH_L1, CH_R, CH_X, LABEL_CHANNELS, LIDAR_CHANNELS, RGB_CHANNELS};
use super::projection::FovSpec;
use crate::error::{Error, Result};
use crate::kitti_io::{CalibrationSet, LabelRaster, RgbRaster};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColorizeStats {
    pub colored: usize,
    pub uncolored: usize,
}

impl ColorizeStats {
    pub fn colored_fraction(&self) -> f64 {
        let total = self.colored + self.uncolored;
        if total == 0 {
            0.0
        } else {
            self.colored as f64 / total as f64
        }
    }
}

fn check_image(image_w: u32, image_h: u32, calib: &CalibrationSet) -> Result<()> {
    match calib.image_size {
        Some(size) if size != (image_w, image_h) => Err(Error::contract(format!(
            "calibration image size {size:?} does not match raster {}x{}",
            image_w, image_h
        ))),
        _ => Ok(()),
    }
}

/// Camera pixel hit by the point stored in a masked cell.
pub fn cell_pixel(
    frame: &PgmFrame,
    cell: usize,
    calib: &CalibrationSet,
    width: u32,
    height: u32,
) -> Option<(u32, u32)> {
    let f = frame.features(cell);
    calib.pixel_of(
        f[CH_X] as f64,
        f[CH_X + 1] as f64,
        f[CH_X + 2] as f64,
        width,
        height,
    )
}

/// Appends `[r, g, b]` sampled at the nearest pixel of each masked cell's
/// point. Cells that project outside the image stay masked with zero color.
pub fn colorize(
    frame: &PgmFrame,
    image: &RgbRaster,
    calib: &CalibrationSet,
) -> Result<(PgmFrame, ColorizeStats)> {
    if frame.c != LIDAR_CHANNELS {
        return Err(Error::contract(format!(
            "colorize expects a {LIDAR_CHANNELS}-channel frame, got {}",
            frame.c
        )));
    }
    check_image(image.width, image.height, calib)?;
    let mut out = frame.widened(RGB_CHANNELS - LIDAR_CHANNELS);
    let mut stats = ColorizeStats::default();
    for cell in 0..frame.cells() {
        if !frame.mask[cell] {
            continue;
        }
        match cell_pixel(frame, cell, calib, image.width, image.height) {
            Some((u, v)) => {
                let rgb = image.pixel(u, v);
                out.data[cell * RGB_CHANNELS + CH_R..cell * RGB_CHANNELS + CH_R + 3]
                    .copy_from_slice(&rgb);
                stats.colored += 1;
            }
            None => stats.uncolored += 1,
        }
    }
    Ok((out, stats))
}

/// Dense camera resample onto the grid: masked cells sample through their
/// own point, empty cells through the cell-center ray at `ray_depth` meters.
pub fn image_grid(
    frame: &PgmFrame,
    image: &RgbRaster,
    calib: &CalibrationSet,
    fov: &FovSpec,
    ray_depth: f64,
) -> Result<Vec<f32>> {
    check_image(image.width, image.height, calib)?;
    let mut grid = vec![0.0f32; frame.cells() * 3];
    for row in 0..frame.h {
        for col in 0..frame.w {
            let cell = frame.cell(row, col);
            let px = if frame.mask[cell] {
                cell_pixel(frame, cell, calib, image.width, image.height)
            } else {
                let (yaw, pitch) = fov.cell_center(row, col, frame.h, frame.w);
                let (yaw, pitch) = (yaw.to_radians(), pitch.to_radians());
                calib.pixel_of(
                    ray_depth * pitch.cos() * yaw.cos(),
                    ray_depth * pitch.cos() * yaw.sin(),
                    ray_depth * pitch.sin(),
                    image.width,
                    image.height,
                )
            };
            if let Some((u, v)) = px {
                grid[cell * 3..cell * 3 + 3].copy_from_slice(&image.pixel(u, v));
            }
        }
    }
    Ok(grid)
}

/// Samples a camera label raster at every masked cell; cells without a
/// projection get class 0.
pub fn sample_label_raster(
    frame: &PgmFrame,
    labels: &LabelRaster,
    calib: &CalibrationSet,
) -> Vec<u32> {
    (0..frame.cells())
        .map(|cell| {
            if !frame.mask[cell] {
                return 0;
            }
            cell_pixel(frame, cell, calib, labels.width, labels.height)
                .map_or(0, |(u, v)| labels.get(u, v) as u32)
        })
        .collect()
}

/// Appends the two label-map channels, each a class index divided by
/// `num_scored` (so the highest scored class maps to 1.0).
pub fn attach_label_channels(
    frame: &PgmFrame,
    l1: &[u32],
    l2: &[u32],
    num_scored: usize,
) -> Result<PgmFrame> {
    if frame.c != RGB_CHANNELS {
        return Err(Error::contract(format!(
            "label channels expect an {RGB_CHANNELS}-channel frame, got {}",
            frame.c
        )));
    }
    if l1.len() != frame.cells() || l2.len() != frame.cells() {
        return Err(Error::contract(format!(
            "label maps have {} and {} cells, frame has {}x{}",
            l1.len(),
            l2.len(),
            frame.h,
            frame.w
        )));
    }
    let mut out = frame.widened(LABEL_CHANNELS - RGB_CHANNELS);
    let scale = num_scored as f32;
    for cell in 0..frame.cells() {
        if frame.mask[cell] {
            out.data[cell * LABEL_CHANNELS + CH_L1] = l1[cell] as f32 / scale;
            out.data[cell * LABEL_CHANNELS + CH_L1 + 1] = l2[cell] as f32 / scale;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::spherical_project;
    use crate::kitti_io::{Point, PointCloud};

    const IDENT: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];

    fn one_cell_frame(x: f32, y: f32, z: f32) -> PgmFrame {
        let mut f = PgmFrame::empty(1, 1, 5);
        let r = (x * x + y * y + z * z).sqrt();
        f.data.copy_from_slice(&[x, y, z, 0.5, r]);
        f.mask[0] = true;
        f
    }

    #[test]
    fn identity_projection_samples_expected_pixel() {
        let (w, h) = (40u32, 20u32);
        let mut img = RgbRaster::new(w, h);
        img.set_pixel(10, 5, [0.2, 0.4, 0.6]);
        let calib = CalibrationSet::new(IDENT, IDENT).with_image_size(w, h);
        let f = one_cell_frame(0.25 * w as f32, 0.25 * h as f32, 1.0);
        let (out, stats) = colorize(&f, &img, &calib).unwrap();
        assert_eq!(&out.features(0)[5..], &[0.2, 0.4, 0.6]);
        assert_eq!(stats, ColorizeStats { colored: 1, uncolored: 0 });
        assert_eq!(&out.features(0)[..5], f.features(0));
    }

    #[test]
    fn behind_camera_is_uncolored() {
        let img = RgbRaster {
            width: 4,
            height: 4,
            data: vec![1.0; 48],
        };
        let calib = CalibrationSet::new(IDENT, IDENT);
        let f = one_cell_frame(1.0, 1.0, -2.0);
        let (out, stats) = colorize(&f, &img, &calib).unwrap();
        assert_eq!(stats.uncolored, 1);
        assert!(out.mask[0]);
        assert_eq!(&out.features(0)[5..], &[0.0; 3]);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let img = RgbRaster::new(2, 2);
        let calib = CalibrationSet::new(IDENT, IDENT);
        let f = PgmFrame::empty(1, 1, 8);
        assert!(matches!(colorize(&f, &img, &calib), Err(Error::Contract(_))));
    }

    #[test]
    fn label_channels_normalize() {
        let f = PgmFrame::empty(1, 2, 8);
        let out = attach_label_channels(&f, &[0, 0], &[0, 0], 15).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        let mut g = PgmFrame::empty(1, 2, 8);
        g.mask[0] = true;
        g.data[4] = 1.0;
        let out = attach_label_channels(&g, &[15, 15], &[3, 3], 15).unwrap();
        assert_eq!(out.features(0)[8], 1.0);
        assert_eq!(out.features(0)[9], 0.2);
        // unmasked cell stays zero even with nonzero labels
        assert_eq!(out.features(1)[8], 0.0);
        assert!(attach_label_channels(&g, &[1], &[1, 1], 15).is_err());
    }

    #[test]
    fn colorize_leaves_geometry_untouched() {
        let cloud = PointCloud::from_points(
            (0..50)
                .map(|i| Point::new(5.0 + i as f32, (i as f32 - 25.0) * 0.3, -1.0, 0.2))
                .collect(),
        );
        let f = spherical_project(&cloud, &FovSpec::default(), 8, 32);
        let img = RgbRaster::new(10, 10);
        let calib = CalibrationSet::new(IDENT, IDENT);
        let (out, _) = colorize(&f, &img, &calib).unwrap();
        assert_eq!(out.mask, f.mask);
        for cell in 0..f.cells() {
            assert_eq!(&out.features(cell)[..5], f.features(cell));
        }
    }
}
