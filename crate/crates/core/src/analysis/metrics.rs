//! Thresholded overlap metrics for binary segmentation.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

/// Pixel counts of a thresholded prediction against a binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl Overlap {
    /// Counts `pred >= threshold` against `gt >= 0.5`.
    pub fn measure(pred: &Array4<f64>, gt: &Array4<f64>, threshold: f64) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Contract(format!(
                "metric shapes differ: {:?} vs {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut o = Overlap::default();
        Zip::from(pred).and(gt).for_each(|&p, &g| {
            let (p, g) = (p >= threshold, g >= 0.5);
            o.pred += p as u64;
            o.truth += g as u64;
            o.intersection += (p && g) as u64;
        });
        Ok(o)
    }

    pub fn merge(self, other: Overlap) -> Overlap {
        Overlap {
            intersection: self.intersection + other.intersection,
            pred: self.pred + other.pred,
            truth: self.truth + other.truth,
        }
    }

    /// `|P & G| / |P | G|`; 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let union = self.pred + self.truth - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }

    /// `2 |P & G| / (|P| + |G|)`; 1 when both are empty.
    pub fn dsc(&self) -> f64 {
        let s = self.pred + self.truth;
        if s == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / s as f64
        }
    }
}

pub fn iou(pred: &Array4<f64>, gt: &Array4<f64>, threshold: f64) -> Result<f64> {
    Ok(Overlap::measure(pred, gt, threshold)?.iou())
}

pub fn dsc(pred: &Array4<f64>, gt: &Array4<f64>, threshold: f64) -> Result<f64> {
    Ok(Overlap::measure(pred, gt, threshold)?.dsc())
}
