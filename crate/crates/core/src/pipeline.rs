//! Scan-to-frame preparation shared by the CLI, the FFI layer and tests.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{colorize, image_grid, spherical_project, FovSpec, PgmFrame};
use crate::kitti_io::{
    read_calib_with_key, read_image, read_label_image, read_labeled_scan, read_scan_with_report,
    CalibrationSet, Dataset, LabelRaster, PointCloud, RgbRaster,
};
use crate::labels::{ClassSpec, LabelSource};
use crate::models::{l1_from_image_model, l1_from_label_raster, late_fusion_prepare, Model, ModelKind};
use crate::synth::Scene;

/// Grid geometry and label tables used to build frames.
#[derive(Debug, Clone)]
pub struct FrameSpec {
    pub fov: FovSpec,
    pub h: usize,
    pub w: usize,
    /// Depth (m) at which empty cells sample the camera for the image grid.
    pub ray_depth: f64,
    pub classes: ClassSpec,
    pub calib_key: String,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            fov: FovSpec::default(),
            h: 64,
            w: 512,
            ray_depth: 20.0,
            classes: ClassSpec::default(),
            calib_key: "P2".into(),
        }
    }
}

/// One scan with whatever camera data was loaded alongside it. Labels are
/// already in the reduced class space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub image: Option<RgbRaster>,
    pub calib: Option<CalibrationSet>,
    pub image_labels: Option<LabelRaster>,
}

/// Where the late-fusion `l1` map comes from.
pub enum L1Source<'a> {
    /// Camera label raster attached to the sample.
    Raster,
    ImageModel(&'a Model),
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        self.fov.validate()?;
        crate::models::check_grid(self.h, self.w)
    }

    fn remap_raster(&self, raster: LabelRaster) -> LabelRaster {
        let (data, _) = self.classes.remap(&raster.data, LabelSource::Cityscapes);
        LabelRaster { data, ..raster }
    }

    pub fn sample_from_scene(&self, scene: &Scene) -> Result<Sample> {
        let raw = scene.cloud.labels.as_deref().unwrap_or(&[]);
        let (reduced, _) = self.classes.remap(raw, LabelSource::SemanticKitti);
        let cloud = scene.cloud.clone().with_labels(reduced)?;
        Ok(Sample {
            cloud,
            image: Some(scene.image.clone()),
            calib: Some(scene.calib.clone()),
            image_labels: Some(self.remap_raster(scene.image_labels.clone())),
        })
    }

    /// Loads scan `id` of `seq`. Labels are read when the `.label` file
    /// exists; camera data when `camera` is set; the camera label raster
    /// from `<dir>/<seq>/<id>.png` (or `<dir>/<id>.png` when there is no
    /// per-sequence subdirectory) when a directory is given.
    pub fn load_sample(
        &self,
        dataset: &Dataset,
        seq: &str,
        id: &str,
        camera: bool,
        image_labels_dir: Option<&Path>,
    ) -> Result<Sample> {
        let scan = dataset.scan_path(seq, id);
        let label = dataset.label_path(seq, id);
        let (cloud, report) = if label.exists() {
            read_labeled_scan(&scan, &label)?
        } else {
            read_scan_with_report(&scan)?
        };
        if report.dropped_nonfinite > 0 {
            log::warn!("{}: dropped {} non-finite points", scan.display(), report.dropped_nonfinite);
        }
        let cloud = match cloud.labels.clone() {
            Some(raw) => {
                let (reduced, _) = self.classes.remap(&raw, LabelSource::SemanticKitti);
                cloud.with_labels(reduced)?
            }
            None => cloud,
        };
        let (image, calib) = if camera {
            let image = read_image(dataset.image_path(seq, id))?;
            let calib = read_calib_with_key(dataset.calib_path(seq), &self.calib_key)?
                .with_image_size(image.width, image.height);
            calib.validate()?;
            (Some(image), Some(calib))
        } else {
            (None, None)
        };
        let image_labels = match image_labels_dir {
            Some(dir) => {
                let per_seq = dir.join(seq);
                let base = if per_seq.is_dir() { per_seq } else { dir.to_path_buf() };
                let path: PathBuf = base.join(format!("{id}.png"));
                if !path.exists() {
                    return Err(Error::io(
                        &path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "image label map not found"),
                    ));
                }
                Some(self.remap_raster(read_label_image(&path)?))
            }
            None => None,
        };
        Ok(Sample { cloud, image, calib, image_labels })
    }

    pub fn lidar_frame(&self, sample: &Sample) -> PgmFrame {
        spherical_project(&sample.cloud, &self.fov, self.h, self.w)
    }

    fn camera<'s>(&self, sample: &'s Sample) -> Result<(&'s RgbRaster, &'s CalibrationSet)> {
        match (&sample.image, &sample.calib) {
            (Some(i), Some(c)) => Ok((i, c)),
            _ => Err(Error::contract("this step needs a camera image and calibration")),
        }
    }

    /// 8-channel colorized frame.
    pub fn color_frame(&self, sample: &Sample) -> Result<PgmFrame> {
        let (image, calib) = self.camera(sample)?;
        let (frame, stats) = colorize(&self.lidar_frame(sample), image, calib)?;
        if stats.uncolored > 0 {
            log::debug!("{} masked cells fell outside the image", stats.uncolored);
        }
        Ok(frame)
    }

    /// Adds the dense camera grid used by the image branches.
    pub fn attach_image(&self, mut frame: PgmFrame, sample: &Sample) -> Result<PgmFrame> {
        let (image, calib) = self.camera(sample)?;
        frame.image = Some(image_grid(&frame, image, calib, &self.fov, self.ray_depth)?);
        Ok(frame)
    }

    /// Frame with the channels and image grid a model kind consumes.
    /// Late fusion needs upstream models; use [`FrameSpec::late_frame`].
    pub fn frame(&self, sample: &Sample, kind: ModelKind) -> Result<PgmFrame> {
        match kind {
            ModelKind::Lidar => Ok(self.lidar_frame(sample)),
            ModelKind::Early => self.color_frame(sample),
            ModelKind::Mid | ModelKind::Image => self.attach_image(self.lidar_frame(sample), sample),
            ModelKind::Late => Err(Error::contract("late-fusion frames need a lidar model")),
        }
    }

    pub fn late_frame(&self, sample: &Sample, lidar: &Model, l1: L1Source<'_>) -> Result<PgmFrame> {
        let color = self.color_frame(sample)?;
        let l1 = match l1 {
            L1Source::Raster => {
                let raster = sample
                    .image_labels
                    .as_ref()
                    .ok_or_else(|| Error::contract("late fusion needs an image label map"))?;
                l1_from_label_raster(&color, raster, self.camera(sample)?.1)
            }
            L1Source::ImageModel(model) => {
                let f = self.attach_image(self.lidar_frame(sample), sample)?;
                l1_from_image_model(model, &f)?
            }
        };
        late_fusion_prepare(&color, lidar, &l1)
    }
}
