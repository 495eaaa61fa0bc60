use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type Mat34 = [[f64; 4]; 3];

/// Camera projection plus LiDAR-to-camera transform for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub proj: Mat34,
    pub tr_velo_to_cam: Mat34,
    /// (width, height) of the camera raster, once known.
    pub image_size: Option<(u32, u32)>,
}

impl CalibrationSet {
    pub fn new(proj: Mat34, tr_velo_to_cam: Mat34) -> Self {
        Self {
            proj,
            tr_velo_to_cam,
            image_size: None,
        }
    }

    pub fn with_image_size(mut self, width: u32, height: u32) -> Self {
        self.image_size = Some((width, height));
        self
    }

    pub fn rotation_determinant(&self) -> f64 {
        let r = &self.tr_velo_to_cam;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj[0][0] == 0.0 || self.proj[1][1] == 0.0 {
            return Err(Error::contract("projection matrix has a zero focal entry"));
        }
        let det = self.rotation_determinant();
        if (det - 1.0).abs() > 1e-3 {
            return Err(Error::contract(format!(
                "LiDAR-to-camera rotation determinant {det} is not within 1e-3 of 1"
            )));
        }
        Ok(())
    }

    /// Projects a LiDAR-frame point to continuous pixel coordinates.
    /// Returns `(u, v, depth)` where depth is the homogeneous scale `p2`.
    pub fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let t = &self.tr_velo_to_cam;
        let cam = [
            t[0][0] * x + t[0][1] * y + t[0][2] * z + t[0][3],
            t[1][0] * x + t[1][1] * y + t[1][2] * z + t[1][3],
            t[2][0] * x + t[2][1] * y + t[2][2] * z + t[2][3],
        ];
        let p = &self.proj;
        let h = [
            p[0][0] * cam[0] + p[0][1] * cam[1] + p[0][2] * cam[2] + p[0][3],
            p[1][0] * cam[0] + p[1][1] * cam[1] + p[1][2] * cam[2] + p[1][3],
            p[2][0] * cam[0] + p[2][1] * cam[1] + p[2][2] * cam[2] + p[2][3],
        ];
        (h[0] / h[2], h[1] / h[2], h[2])
    }

    /// Integer pixel hit by a point, if it lies in front of the camera and
    /// inside the raster.
    pub fn pixel_of(&self, x: f64, y: f64, z: f64, width: u32, height: u32) -> Option<(u32, u32)> {
        let (u, v, depth) = self.project(x, y, z);
        if depth > 0.0 && u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64 {
            Some((u.floor() as u32, v.floor() as u32))
        } else {
            None
        }
    }
}

/// Parses a KITTI odometry `calib.txt` using `P2` and `Tr`.
pub fn read_calib(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    read_calib_with_key(path, "P2")
}

pub fn read_calib_with_key(path: impl AsRef<Path>, proj_key: &str) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib(&text, proj_key, path)
}

pub fn parse_calib(text: &str, proj_key: &str, path: &Path) -> Result<CalibrationSet> {
    let mut entries: HashMap<&str, Mat34> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected '<KEY>: values'".into(),
            });
        };
        let mut values = Vec::with_capacity(12);
        for tok in rest.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("non-numeric token {tok:?}"),
            })?;
            values.push(v);
        }
        if values.len() != 12 {
            // Keys that are not 3x4 matrices (e.g. R0_rect) are ignored unless
            // requested below.
            continue;
        }
        let mut m = [[0.0; 4]; 3];
        for (i, v) in values.into_iter().enumerate() {
            m[i / 4][i % 4] = v;
        }
        entries.insert(key.trim(), m);
    }
    let take = |key: &str| {
        entries
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(path, format!("missing calibration key {key}")))
    };
    Ok(CalibrationSet::new(take(proj_key)?, take("Tr")?))
}

pub fn format_calib(calib: &CalibrationSet) -> String {
    let row = |m: &Mat34| {
        m.iter()
            .flatten()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let p = row(&calib.proj);
    format!(
        "P0: {p}\nP1: {p}\nP2: {p}\nP3: {p}\nTr: {}\n",
        row(&calib.tr_velo_to_cam)
    )
}

pub fn write_calib(path: impl AsRef<Path>, calib: &CalibrationSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_calib(calib)).map_err(|e| Error::io(path, e))
}
