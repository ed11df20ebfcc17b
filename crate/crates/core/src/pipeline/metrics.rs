//! Segmentation metrics and structured-text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CtdnError, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// IoU per label including background; `None` when the label is absent
    /// from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub wall_clock_secs: f64,
}

/// Accumulates a `(K+1)²` confusion matrix.
#[derive(Debug, Clone)]
pub struct Confusion {
    k1: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_labels: usize) -> Self {
        Confusion {
            k1: num_labels,
            counts: vec![0; num_labels * num_labels],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CtdnError::LengthMismatch {
                expected: gt.len(),
                got: pred.len(),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k1 || g >= self.k1 {
                return Err(CtdnError::IndexOutOfRange {
                    index: p.max(g),
                    len: self.k1,
                });
            }
            self.counts[g * self.k1 + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let k1 = self.k1;
        let total: u64 = self.counts.iter().sum();
        let mut per_class = Vec::with_capacity(k1);
        let mut correct = 0u64;
        for c in 0..k1 {
            let tp = self.counts[c * k1 + c];
            correct += tp;
            let gt_c: u64 = (0..k1).map(|p| self.counts[c * k1 + p]).sum();
            let pred_c: u64 = (0..k1).map(|g| self.counts[g * k1 + c]).sum();
            let union = gt_c + pred_c - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        MetricsReport {
            miou: if valid.is_empty() {
                0.0
            } else {
                valid.iter().sum::<f64>() / valid.len() as f64
            },
            pixel_accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            per_class_iou: per_class,
            confusion: self.counts.chunks(k1).map(|r| r.to_vec()).collect(),
            ..Default::default()
        }
    }
}

/// mIoU over labels `0..=num_classes`, background included.
pub fn evaluate_miou(
    pred: &[Vec<u8>],
    gt: &[Vec<u8>],
    num_classes: usize,
) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(CtdnError::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let mut c = Confusion::new(num_classes + 1);
    for (p, g) in pred.iter().zip(gt) {
        c.add(p, g)?;
    }
    Ok(c.report())
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "pixel_accuracy = {:.6}", self.pixel_accuracy);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "iou.{c} = {v:.6}");
                }
                None => {
                    let _ = writeln!(s, "iou.{c} = absent");
                }
            }
        }
        for (g, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "confusion.{g} = {}", cells.join(" "));
        }
        for (name, curve) in &self.loss_curves {
            let cells: Vec<String> = curve.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "curve.{name} = {}", cells.join(" "));
        }
        let _ = writeln!(s, "wall_clock_secs = {:.3}", self.wall_clock_secs);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| CtdnError::io(d, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| CtdnError::io(path, e))
    }
}
