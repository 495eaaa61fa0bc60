//! Confusion matrix, per-class IoU, mIoU and overall accuracy.

use crate::error::{Error, Result};
use crate::labels::{CLASS_NAMES, NUM_CLASSES, NUM_SCORED};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU of classes 1..=15; `None` where the class is absent from both
    /// truth and prediction.
    pub per_class: [Option<f64>; NUM_SCORED],
    pub oa: f64,
}

impl ConfusionMatrix {
    /// Adds every sample whose truth is labeled and whose mask (if given)
    /// is set.
    pub fn accumulate(&mut self, truth: &[u32], pred: &[u32], mask: Option<&[bool]>) -> Result<()> {
        if truth.len() != pred.len() || mask.is_some_and(|m| m.len() != truth.len()) {
            return Err(Error::contract(format!(
                "truth ({}), prediction ({}) and mask lengths differ",
                truth.len(),
                pred.len()
            )));
        }
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
                return Err(Error::contract(format!(
                    "class id {} out of range at sample {i}",
                    t.max(p)
                )));
            }
            if t == 0 || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(other.counts.iter()) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..NUM_CLASSES).map(|r| self.counts[r][c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c]
    }

    pub fn miou(&self) -> MiouReport {
        let mut per_class = [None; NUM_SCORED];
        let mut sum = 0.0;
        let mut present = 0usize;
        let mut tp_total = 0u64;
        for c in 1..NUM_CLASSES {
            let tp = self.true_positives(c);
            tp_total += tp;
            let denom = tp + self.false_positives(c) + self.false_negatives(c);
            if denom > 0 {
                let iou = tp as f64 / denom as f64;
                per_class[c - 1] = Some(iou);
                sum += iou;
                present += 1;
            }
        }
        let total = self.total();
        MiouReport {
            miou: if present > 0 { sum / present as f64 } else { 0.0 },
            per_class,
            oa: if total > 0 {
                tp_total as f64 / total as f64
            } else {
                0.0
            },
        }
    }
}

impl MiouReport {
    /// Human-readable table: mIoU, OA, then one column per class.
    pub fn to_table(&self, title: &str) -> String {
        let mut header = format!("{:<16} {:>6} {:>6}", "approach", "mIoU", "OA");
        let mut row = format!("{:<16} {:>6.3} {:>6.3}", title, self.miou, self.oa);
        for (name, v) in CLASS_NAMES[1..].iter().zip(self.per_class.iter()) {
            let width = name.len().max(6);
            header += &format!(" {name:>width$}");
            match v {
                Some(v) => row += &format!(" {v:>width$.3}"),
                None => row += &format!(" {:>width$}", "-"),
            }
        }
        format!("{header}\n{row}\n")
    }

    /// `name<TAB>value` lines; absent classes print `nan`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("miou\t{}\noa\t{}\n", self.miou, self.oa);
        for (name, v) in CLASS_NAMES[1..].iter().zip(self.per_class.iter()) {
            out += &format!("{name}\t{}\n", v.unwrap_or(f64::NAN));
        }
        out
    }
}
