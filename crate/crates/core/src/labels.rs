//! Reduced 15-class label space, source-dataset remapping and loss weights.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kitti_io::{read_labels, Dataset};

pub const CLASS_NAMES: [&str; 16] = [
    "unlabeled",
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "rider",
    "road",
    "sidewalk",
    "building",
    "fence",
    "vegetation",
    "terrain",
    "pole",
    "traffic-sign",
];

/// Softmax bins, including `unlabeled`.
pub const NUM_CLASSES: usize = 16;
/// Classes that enter loss and metrics (all but `unlabeled`).
pub const NUM_SCORED: usize = 15;

/// Default smoothing constant for the inverse-log class weights.
pub const DEFAULT_EPS: f64 = 1.02;

const SEMANTICKITTI_MAP: &str = include_str!("../data/semantickitti.map");
const CITYSCAPES_MAP: &str = include_str!("../data/cityscapes.map");

pub fn class_id(name: &str) -> Option<u16> {
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    SemanticKitti,
    Cityscapes,
}

/// Lookup table from a source dataset's raw IDs to reduced IDs.
#[derive(Debug, Clone)]
pub struct ClassMap {
    table: Vec<u16>,
    known: Vec<bool>,
}

impl ClassMap {
    /// Parses `raw_id<TAB>reduced_name` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = vec![0u16; 1 << 16];
        let mut known = vec![false; 1 << 16];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg,
            };
            let mut parts = line.split('\t').map(str::trim).filter(|s| !s.is_empty());
            let (Some(raw), Some(name)) = (parts.next(), parts.next()) else {
                return Err(err("expected raw_id<TAB>class_name".into()));
            };
            let raw: u16 = raw.parse().map_err(|_| err(format!("bad raw id {raw:?}")))?;
            let id = class_id(name).ok_or_else(|| err(format!("unknown class name {name:?}")))?;
            table[raw as usize] = id;
            known[raw as usize] = true;
        }
        Ok(Self { table, known })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn semantickitti() -> Self {
        Self::parse(SEMANTICKITTI_MAP, Path::new("data/semantickitti.map"))
            .expect("bundled SemanticKITTI map is valid")
    }

    pub fn cityscapes() -> Self {
        Self::parse(CITYSCAPES_MAP, Path::new("data/cityscapes.map"))
            .expect("bundled CityScapes map is valid")
    }

    /// Table that maps every reduced ID to itself.
    pub fn identity() -> Self {
        let mut table = vec![0u16; 1 << 16];
        let mut known = vec![false; 1 << 16];
        for id in 0..NUM_CLASSES {
            table[id] = id as u16;
            known[id] = true;
        }
        Self { table, known }
    }

    pub fn get(&self, raw: u16) -> u16 {
        self.table[raw as usize]
    }

    /// Element-wise lookup; returns the reduced IDs and how many raw IDs were
    /// absent from the table (those map to 0).
    pub fn remap(&self, raw: &[u16]) -> (Vec<u16>, usize) {
        let mut unknown = 0;
        let out = raw
            .iter()
            .map(|&r| {
                if !self.known[r as usize] {
                    unknown += 1;
                }
                self.table[r as usize]
            })
            .collect();
        (out, unknown)
    }
}

/// Both source tables.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub kitti_map: ClassMap,
    pub cityscapes_map: ClassMap,
}

impl Default for ClassSpec {
    fn default() -> Self {
        Self {
            kitti_map: ClassMap::semantickitti(),
            cityscapes_map: ClassMap::cityscapes(),
        }
    }
}

impl ClassSpec {
    pub fn map(&self, source: LabelSource) -> &ClassMap {
        match source {
            LabelSource::SemanticKitti => &self.kitti_map,
            LabelSource::Cityscapes => &self.cityscapes_map,
        }
    }

    pub fn remap(&self, raw: &[u16], source: LabelSource) -> (Vec<u16>, usize) {
        let (out, unknown) = self.map(source).remap(raw);
        if unknown > 0 {
            log::warn!("{unknown} raw label IDs not found in the {source:?} table");
        }
        (out, unknown)
    }
}

/// Per-class point counts in the reduced space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub counts: [u64; NUM_CLASSES],
}

impl ClassCounts {
    pub fn add_labels(&mut self, reduced: &[u16]) {
        for &c in reduced {
            self.counts[c as usize] += 1;
        }
    }

    pub fn merge(mut self, other: &ClassCounts) -> Self {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `f_c = count_c / total` over all classes, unlabeled included.
    pub fn fractions(&self) -> [f64; NUM_CLASSES] {
        let total = self.total();
        let mut f = [0.0; NUM_CLASSES];
        if total > 0 {
            for (fc, &n) in f.iter_mut().zip(self.counts.iter()) {
                *fc = n as f64 / total as f64;
            }
        }
        f
    }
}

/// Counts reduced classes over every raw point of the given sequences.
pub fn class_frequencies(dataset: &Dataset, sequences: &[String], spec: &ClassSpec) -> Result<ClassCounts> {
    let mut jobs = Vec::new();
    for seq in sequences {
        for id in dataset.scan_ids(seq)? {
            jobs.push(dataset.label_path(seq, &id));
        }
    }
    let partial: Vec<Result<ClassCounts>> = jobs
        .par_iter()
        .map(|path| {
            let raw: Vec<u16> = read_labels(path)?.iter().map(|l| l.semantic).collect();
            let mut c = ClassCounts::default();
            c.add_labels(&spec.kitti_map.remap(&raw).0);
            Ok(c)
        })
        .collect();
    partial
        .into_iter()
        .try_fold(ClassCounts::default(), |acc, c| Ok(acc.merge(&c?)))
}

/// `w_c = 1 / ln(f_c + eps)` for scored classes, 0 for `unlabeled`.
pub fn loss_weights(fractions: &[f64], eps: f64) -> Result<Vec<f64>> {
    if fractions.len() != NUM_CLASSES {
        return Err(Error::contract(format!(
            "expected {NUM_CLASSES} class fractions, got {}",
            fractions.len()
        )));
    }
    let mut w = vec![0.0; NUM_CLASSES];
    for c in 1..NUM_CLASSES {
        let f = fractions[c];
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::contract(format!("class fraction {f} outside [0, 1]")));
        }
        let arg = f + eps;
        if arg <= 1.0 {
            return Err(Error::contract(format!(
                "eps {eps} too small: ln({arg}) is not positive for class {}",
                CLASS_NAMES[c]
            )));
        }
        w[c] = 1.0 / arg.ln();
    }
    Ok(w)
}

/// Writes `name value` lines, one per class.
pub fn format_class_values(values: &[f64]) -> String {
    CLASS_NAMES
        .iter()
        .zip(values)
        .map(|(n, v)| format!("{n} {v:e}\n"))
        .collect()
}

pub fn parse_class_values(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; NUM_CLASSES];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let (name, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| err("expected `name value`".into()))?;
        let id = class_id(name).ok_or_else(|| err(format!("unknown class {name:?}")))?;
        out[id as usize] = value
            .trim()
            .parse()
            .map_err(|_| err(format!("bad value {value:?}")))?;
    }
    if let Some(c) = out.iter().position(|v| v.is_nan()) {
        return Err(Error::format(path, format!("missing class {}", CLASS_NAMES[c])));
    }
    Ok(out)
}

pub fn read_class_values(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_values(&text, path)
}
