use std::path::Path;

use crate::error::{Error, Result};

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// One LiDAR sweep.
///
/// `source_index[i]` is the position of point `i` in the file it was read
/// from; it differs from `i` only when non-finite points were dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
    pub source_index: Vec<u32>,
    pub source_len: usize,
}

/// Bookkeeping from a load: points dropped for non-finite values and
/// intensities clamped into [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_nonfinite: usize,
    pub clamped_intensity: usize,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point>) -> Self {
        let n = points.len();
        Self {
            points,
            labels: None,
            source_index: (0..n as u32).collect(),
            source_len: n,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Consistency(format!(
                "label count {} does not match point count {}",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same cloud with its labels passed through `f` (e.g. a class remap).
    pub fn map_labels(mut self, f: impl Fn(&[u16]) -> Vec<u16>) -> Self {
        if let Some(l) = self.labels.take() {
            self.labels = Some(f(&l));
        }
        self
    }
}

/// Decodes raw little-endian float32 quadruples without any filtering.
pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if bytes.len() % POINT_BYTES != 0 {
        let whole = bytes.len() / POINT_BYTES * POINT_BYTES;
        return Err(Error::format(
            path,
            format!(
                "scan truncated: {} bytes is not a multiple of {POINT_BYTES}; partial point at byte offset {whole}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect())
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn sanitize(raw: Vec<Point>, labels: Option<Vec<u16>>) -> (PointCloud, LoadReport) {
    let source_len = raw.len();
    let mut report = LoadReport::default();
    let mut points = Vec::with_capacity(raw.len());
    let mut source_index = Vec::with_capacity(raw.len());
    let mut kept_labels = labels.as_ref().map(|_| Vec::with_capacity(raw.len()));
    for (i, mut p) in raw.into_iter().enumerate() {
        if !p.is_finite() {
            report.dropped_nonfinite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&p.intensity) {
            p.intensity = p.intensity.clamp(0.0, 1.0);
            report.clamped_intensity += 1;
        }
        points.push(p);
        source_index.push(i as u32);
        if let (Some(kept), Some(all)) = (kept_labels.as_mut(), labels.as_ref()) {
            kept.push(all[i]);
        }
    }
    if report.dropped_nonfinite > 0 {
        log::warn!("dropped {} non-finite points", report.dropped_nonfinite);
    }
    (
        PointCloud {
            points,
            labels: kept_labels,
            source_index,
            source_len,
        },
        report,
    )
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a `.bin` velodyne scan.
pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_scan_with_report(path).map(|(c, _)| c)
}

pub fn read_scan_with_report(path: impl AsRef<Path>) -> Result<(PointCloud, LoadReport)> {
    let path = path.as_ref();
    let raw = decode_points(&read_bytes(path)?, path)?;
    Ok(sanitize(raw, None))
}

/// Reads a scan together with its `.label` file, checking that counts agree
/// before any points are filtered.
pub fn read_labeled_scan(
    scan_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<(PointCloud, LoadReport)> {
    let scan_path = scan_path.as_ref();
    let label_path = label_path.as_ref();
    let raw = decode_points(&read_bytes(scan_path)?, scan_path)?;
    let labels = read_labels(label_path)?;
    if labels.len() != raw.len() {
        return Err(Error::Consistency(format!(
            "{} has {} labels but {} has {} points",
            label_path.display(),
            labels.len(),
            scan_path.display(),
            raw.len()
        )));
    }
    let semantic = labels.iter().map(|l| l.semantic).collect();
    Ok(sanitize(raw, Some(semantic)))
}

pub fn write_scan(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_points(points)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelEntry {
    pub semantic: u16,
    pub instance: u16,
}

impl LabelEntry {
    pub fn from_word(word: u32) -> Self {
        Self {
            semantic: (word & 0xFFFF) as u16,
            instance: (word >> 16) as u16,
        }
    }

    pub fn to_word(self) -> u32 {
        (self.instance as u32) << 16 | self.semantic as u32
    }
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<LabelEntry>> {
    if bytes.len() % LABEL_BYTES != 0 {
        return Err(Error::format(
            path,
            format!(
                "label file size {} is not a multiple of {LABEL_BYTES}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(LABEL_BYTES)
        .map(|c| LabelEntry::from_word(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelEntry>> {
    let path = path.as_ref();
    decode_labels(&read_bytes(path)?, path)
}

/// Writes one little-endian u32 word per entry. Used both for dataset
/// labels and for prediction files.
pub fn write_label_words(path: impl AsRef<Path>, words: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(words.len() * LABEL_BYTES);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn single_point_decodes() {
        let bytes = encode_points(&[Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert_eq!(bytes.len(), 16);
        let pts = decode_points(&bytes, &p()).unwrap();
        assert_eq!(pts, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
    }

    #[test]
    fn empty_scan_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        std::fs::write(&path, []).unwrap();
        let cloud = read_scan(&path).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.source_len, 0);
    }

    #[test]
    fn truncated_scan_reports_offset() {
        let err = decode_points(&[0u8; 20], &p()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset 16"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_scan_is_io_error() {
        let err = read_scan("/definitely/not/here.bin").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn label_word_bit_split() {
        let e = LabelEntry::from_word(0x0001_0009);
        assert_eq!(e, LabelEntry { semantic: 9, instance: 1 });
        assert_eq!(e.to_word(), 0x0001_0009);
        assert!(decode_labels(&[], &p()).unwrap().is_empty());
    }

    #[test]
    fn nonfinite_points_dropped_and_intensity_clamped() {
        let raw = vec![
            Point::new(1.0, 0.0, 0.0, 0.5),
            Point::new(f32::NAN, 0.0, 0.0, 0.5),
            Point::new(2.0, 0.0, 0.0, 1.5),
        ];
        let (cloud, rep) = sanitize(raw, Some(vec![10, 11, 12]));
        assert_eq!(rep.dropped_nonfinite, 1);
        assert_eq!(rep.clamped_intensity, 1);
        assert_eq!(cloud.source_index, vec![0, 2]);
        assert_eq!(cloud.labels, Some(vec![10, 12]));
        assert_eq!(cloud.points[1].intensity, 1.0);
        assert_eq!(cloud.source_len, 3);
    }

    #[test]
    fn label_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.bin");
        let l = dir.path().join("a.label");
        write_scan(&s, &[Point::new(1.0, 1.0, 1.0, 0.1); 3]).unwrap();
        write_label_words(&l, &[1, 2]).unwrap();
        let msg = read_labeled_scan(&s, &l).unwrap_err().to_string();
        assert!(msg.contains("2 labels") && msg.contains("3 points"), "{msg}");
    }
}
