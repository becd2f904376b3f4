use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::corpus::IGNORE_LABEL;
use crate::error::{Error, Result};

/// Per-class true-positive, false-positive and false-negative pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Default for ConfusionAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self {
            tp: vec![0; 256],
            fp: vec![0; 256],
            fn_: vec![0; 256],
        }
    }

    /// Adds one prediction / ground-truth pair; ignored pixels are skipped.
    pub fn add(&mut self, prediction: &[u8], truth: &[u8]) {
        assert_eq!(prediction.len(), truth.len(), "prediction and truth sizes differ");
        for (&p, &t) in prediction.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            if p == t {
                self.tp[t as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
    }

    pub fn intersection(&self, class: u32) -> u64 {
        self.tp[class as usize]
    }

    pub fn union(&self, class: u32) -> u64 {
        let c = class as usize;
        self.tp[c] + self.fp[c] + self.fn_[c]
    }

    /// IoU in `[0, 1]`, `None` when the class has zero union.
    pub fn iou(&self, class: u32) -> Option<f64> {
        let u = self.union(class);
        (u > 0).then(|| self.intersection(class) as f64 / u as f64)
    }

    /// Associative merge of two accumulators.
    pub fn merge(&mut self, other: &Self) {
        for c in 0..256 {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    pub fn per_class(&self, classes: &[u32]) -> BTreeMap<u32, f64> {
        classes.iter().filter_map(|&c| self.iou(c).map(|v| (c, v))).collect()
    }
}

/// Mean IoU over `classes` in `[0, 1]`. Classes with zero union are left out;
/// if all are, the result is 0.
pub fn compute_miou(acc: &ConfusionAccumulator, classes: &[u32]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    let ious: Vec<f64> = classes.iter().filter_map(|&c| acc.iou(c)).collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// `2BN / (B + N)`, 0 when both are 0.
pub fn harmonic_mean(miou_b: f64, miou_n: f64) -> Result<f64> {
    for v in [miou_b, miou_n] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::NegativeInput(v));
        }
    }
    if miou_b + miou_n == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * miou_b * miou_n / (miou_b + miou_n))
}
