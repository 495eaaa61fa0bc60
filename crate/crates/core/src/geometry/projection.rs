use rayon::prelude::*;

use super::frame::{PgmFrame, LIDAR_CHANNELS, NO_POINT};
use crate::error::{Error, Result};
use crate::kitti_io::{Point, PointCloud};

/// Angular window of the grid, in degrees. Yaw is measured from +x towards
/// +y, pitch from the horizontal plane upwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovSpec {
    pub yaw_left: f64,
    pub yaw_right: f64,
    pub pitch_up: f64,
    pub pitch_down: f64,
}

impl Default for FovSpec {
    fn default() -> Self {
        Self {
            yaw_left: 40.0,
            yaw_right: -40.0,
            pitch_up: 2.0,
            pitch_down: -18.0,
        }
    }
}

impl FovSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_left > self.yaw_right && self.pitch_up > self.pitch_down) {
            return Err(Error::contract(format!("degenerate field of view {self:?}")));
        }
        Ok(())
    }

    pub fn yaw_span(&self) -> f64 {
        self.yaw_left - self.yaw_right
    }

    pub fn pitch_span(&self) -> f64 {
        self.pitch_up - self.pitch_down
    }

    /// Yaw/pitch (degrees) through the center of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
        let yaw = self.yaw_left - (col as f64 + 0.5) / w as f64 * self.yaw_span();
        let pitch = self.pitch_up - (row as f64 + 0.5) / h as f64 * self.pitch_span();
        (yaw, pitch)
    }
}

/// Grid placement of one point: `(row, col, range)`, or `None` when the
/// point falls outside the field of view.
#[inline]
pub fn grid_cell(p: &Point, fov: &FovSpec, h: usize, w: usize) -> Option<(usize, usize, f64)> {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let range = (x * x + y * y + z * z).sqrt();
    if !(range > 0.0) {
        return None;
    }
    let yaw = y.atan2(x).to_degrees();
    let pitch = (z / range).asin().to_degrees();
    if yaw > fov.yaw_left || yaw < fov.yaw_right || pitch > fov.pitch_up || pitch < fov.pitch_down {
        return None;
    }
    let u = ((fov.yaw_left - yaw) / (fov.yaw_left - fov.yaw_right) * w as f64).floor();
    let v = ((fov.pitch_up - pitch) / (fov.pitch_up - fov.pitch_down) * h as f64).floor();
    let col = (u.max(0.0) as usize).min(w - 1);
    let row = (v.max(0.0) as usize).min(h - 1);
    Some((row, col, range))
}

const CHUNK: usize = 4096;

/// Projects a cloud into a 5-channel polar grid map. When several points
/// share a cell the nearest one is kept; equal ranges keep the earlier point.
pub fn spherical_project(cloud: &PointCloud, fov: &FovSpec, h: usize, w: usize) -> PgmFrame {
    assert!(h >= 1 && w >= 1, "grid must be at least 1x1");
    let placements: Vec<Option<(usize, usize, f64)>> = cloud
        .points
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| chunk.iter().map(|p| grid_cell(p, fov, h, w)))
        .collect();

    let mut winner = vec![usize::MAX; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for (i, placement) in placements.iter().enumerate() {
        if let Some((row, col, range)) = *placement {
            let cell = row * w + col;
            if range < best[cell] {
                best[cell] = range;
                winner[cell] = i;
            }
        }
    }

    let mut frame = PgmFrame::empty(h, w, LIDAR_CHANNELS);
    let mut point_index = vec![NO_POINT; h * w];
    for (cell, &i) in winner.iter().enumerate() {
        if i == usize::MAX {
            continue;
        }
        let p = &cloud.points[i];
        frame.data[cell * LIDAR_CHANNELS..(cell + 1) * LIDAR_CHANNELS].copy_from_slice(&[
            p.x,
            p.y,
            p.z,
            p.intensity,
            best[cell] as f32,
        ]);
        frame.mask[cell] = true;
        frame.labels[cell] = cloud.labels.as_ref().map_or(0, |l| l[i] as u32);
        point_index[cell] = cloud.source_index.get(i).copied().unwrap_or(i as u32);
    }
    frame.point_index = Some(point_index);
    frame
}

/// One `(point index, class)` pair per masked cell.
pub fn backproject_predictions(frame: &PgmFrame, pred: &[u32]) -> Result<Vec<(u32, u32)>> {
    let index = frame
        .point_index
        .as_ref()
        .ok_or_else(|| Error::contract("frame carries no point index"))?;
    if pred.len() != frame.cells() {
        return Err(Error::contract(format!(
            "prediction has {} cells, frame has {}",
            pred.len(),
            frame.cells()
        )));
    }
    Ok((0..frame.cells())
        .filter(|&c| frame.mask[c] && index[c] != NO_POINT)
        .map(|c| (index[c], pred[c]))
        .collect())
}

/// Expands back-projected pairs to one class per source point; points that
/// did not win a cell receive class 0.
pub fn scatter_to_points(source_len: usize, pairs: &[(u32, u32)]) -> Vec<u32> {
    let mut out = vec![0u32; source_len];
    for &(i, class) in pairs {
        if let Some(slot) = out.get_mut(i as usize) {
            *slot = class;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<Point>) -> PointCloud {
        PointCloud::from_points(points)
    }

    #[test]
    fn forward_point_lands_in_center() {
        let f = spherical_project(
            &cloud(vec![Point::new(10.0, 0.0, 0.0, 0.3)]),
            &FovSpec::default(),
            64,
            512,
        );
        // yaw 0 -> floor(40/80*512) = 256; pitch 0 -> floor(2/20*64) = 6
        let cell = f.cell(6, 256);
        assert!(f.mask[cell]);
        assert_eq!(f.features(cell), &[10.0, 0.0, 0.0, 0.3, 10.0]);
        assert_eq!(f.masked_cells(), 1);
        f.validate().unwrap();
    }

    #[test]
    fn empty_cloud_gives_empty_mask() {
        let f = spherical_project(&cloud(vec![]), &FovSpec::default(), 64, 512);
        assert_eq!(f.masked_cells(), 0);
        assert_eq!((f.h, f.w, f.c), (64, 512, 5));
    }

    #[test]
    fn nearest_point_wins_collision() {
        let far = Point::new(9.0, 0.0, 0.0, 0.9);
        let near = Point::new(5.0, 0.0, 0.0, 0.1);
        let f = spherical_project(
            &cloud(vec![far, near]).with_labels(vec![1, 2]).unwrap(),
            &FovSpec::default(),
            64,
            512,
        );
        let cell = f.cell(6, 256);
        assert_eq!(f.features(cell)[4], 5.0);
        assert_eq!(f.labels[cell], 2);
        assert_eq!(f.point_index.as_ref().unwrap()[cell], 1);
    }

    #[test]
    fn outside_fov_and_origin_discarded() {
        let pts = vec![
            Point::new(-10.0, 0.0, 0.0, 0.1),
            Point::new(10.0, 0.0, 5.0, 0.1),
            Point::new(0.0, 0.0, 0.0, 0.1),
        ];
        let f = spherical_project(&cloud(pts), &FovSpec::default(), 64, 512);
        assert_eq!(f.masked_cells(), 0);
    }

    #[test]
    fn right_border_clamps_to_last_column() {
        let yaw = (-40.0f64).to_radians();
        let p = Point::new((10.0 * yaw.cos()) as f32, (10.0 * yaw.sin()) as f32, -1.0, 0.0);
        if let Some((_, col, _)) = grid_cell(&p, &FovSpec::default(), 64, 512) {
            assert_eq!(col, 511);
        }
    }

    #[test]
    fn backprojection_pairs() {
        let mut f = PgmFrame::empty(1, 2, 5);
        f.mask[1] = true;
        f.data[5 + 4] = 1.0;
        f.point_index = Some(vec![NO_POINT, 7]);
        assert_eq!(backproject_predictions(&f, &[0, 3]).unwrap(), vec![(7, 3)]);
        let g = PgmFrame {
            point_index: Some(vec![NO_POINT; 2]),
            ..PgmFrame::empty(1, 2, 5)
        };
        assert!(backproject_predictions(&g, &[1, 1]).unwrap().is_empty());
        assert_eq!(scatter_to_points(9, &[(7, 3)])[7], 3);
    }
}
