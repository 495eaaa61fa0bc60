//! Readers and writers for SemanticKITTI data and the crate's own files.

mod calib;
mod dataset;
mod image;
mod pgm_file;
mod scan;

pub use self::calib::{
    format_calib, parse_calib, read_calib, read_calib_with_key, write_calib, CalibrationSet, Mat34,
};
pub use self::dataset::{
    list_stems, Dataset, Split, SplitManifest, FULL_TEST_SCANS, FULL_TRAIN_SCANS, FULL_VAL_SCANS,
};
pub use self::image::{
    read_image, read_label_image, write_image, write_label_image, LabelRaster, RgbRaster,
};
pub use self::pgm_file::{decode_pgm, encode_pgm, read_pgm, write_pgm, PGM_HEADER_BYTES};
pub use self::scan::{
    decode_labels, decode_points, encode_points, read_labeled_scan, read_labels, read_scan,
    read_scan_with_report, write_label_words, write_scan, LabelEntry, LoadReport, Point, PointCloud,
};

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}
