use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Scan totals of the default split on the complete SemanticKITTI release.
pub const FULL_TRAIN_SCANS: usize = 18_029;
pub const FULL_VAL_SCANS: usize = 1_101;
pub const FULL_TEST_SCANS: usize = 4_071;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Number of scans found per sequence (filled by [`SplitManifest::count_scans`]).
    pub scan_counts: BTreeMap<String, usize>,
}

fn seqs(ids: &[u32]) -> Vec<String> {
    ids.iter().map(|i| format!("{i:02}")).collect()
}

impl Default for SplitManifest {
    fn default() -> Self {
        Self {
            train: seqs(&[0, 1, 2, 3, 4, 5, 6, 9, 10]),
            val: seqs(&[7]),
            test: seqs(&[8]),
            scan_counts: BTreeMap::new(),
        }
    }
}

impl SplitManifest {
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let m = Self {
            train,
            val,
            test,
            scan_counts: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let sets = [&self.train, &self.val, &self.test];
        let mut seen = BTreeSet::new();
        for s in sets.iter().flat_map(|v| v.iter()) {
            if !seen.insert(s) {
                return Err(Error::contract(format!(
                    "sequence {s} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn sequences(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Fills per-sequence counts with the number of `.bin` files present.
    pub fn count_scans(&mut self, dataset: &Dataset) -> Result<()> {
        let all: Vec<String> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .cloned()
            .collect();
        for seq in all {
            let n = if dataset.sequence_dir(&seq).exists() {
                dataset.scan_ids(&seq)?.len()
            } else {
                0
            };
            self.scan_counts.insert(seq, n);
        }
        Ok(())
    }

    pub fn total(&self, split: Split) -> usize {
        self.sequences(split)
            .iter()
            .map(|s| self.scan_counts.get(s).copied().unwrap_or(0))
            .sum()
    }
}

/// `<root>/sequences/<NN>/{velodyne,labels,image_2,calib.txt}`
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sequence_dir(&self, seq: &str) -> PathBuf {
        self.root.join("sequences").join(seq)
    }

    pub fn scan_path(&self, seq: &str, id: &str) -> PathBuf {
        self.sequence_dir(seq).join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label_path(&self, seq: &str, id: &str) -> PathBuf {
        self.sequence_dir(seq).join("labels").join(format!("{id}.label"))
    }

    pub fn image_path(&self, seq: &str, id: &str) -> PathBuf {
        self.sequence_dir(seq).join("image_2").join(format!("{id}.png"))
    }

    pub fn calib_path(&self, seq: &str) -> PathBuf {
        self.sequence_dir(seq).join("calib.txt")
    }

    /// Sorted scan ids (file stems) in a sequence's `velodyne` directory.
    pub fn scan_ids(&self, seq: &str) -> Result<Vec<String>> {
        list_stems(&self.sequence_dir(seq).join("velodyne"), "bin")
    }
}

pub fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_disjoint() {
        let m = SplitManifest::default();
        m.validate().unwrap();
        assert_eq!(m.train.len(), 9);
        assert_eq!(m.val, vec!["07"]);
        assert_eq!(m.test, vec!["08"]);
    }

    #[test]
    fn overlapping_split_rejected() {
        let r = SplitManifest::new(vec!["00".into()], vec!["00".into()], vec![]);
        assert!(r.is_err());
    }

    #[test]
    fn counts_match_files_present() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(dir.path());
        let velo = ds.sequence_dir("07").join("velodyne");
        std::fs::create_dir_all(&velo).unwrap();
        for i in 0..3 {
            std::fs::write(velo.join(format!("{i:06}.bin")), []).unwrap();
        }
        std::fs::write(velo.join("notes.txt"), "x").unwrap();
        let mut m = SplitManifest::default();
        m.count_scans(&ds).unwrap();
        assert_eq!(m.total(Split::Val), 3);
        assert_eq!(m.total(Split::Train), 0);
        assert_eq!(ds.scan_ids("07").unwrap(), vec!["000000", "000001", "000002"]);
    }
}
