//! Classification and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, metric: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric { metric });
    }
    Ok(num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    /// Counts at a decision threshold: `score >= threshold` predicts positive.
    pub fn from_scores(samples: &[ScoredSample], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for s in samples {
            match (s.score >= threshold, s.label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    pub fn sensitivity(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    pub fn specificity(&self) -> Result<f64> {
        ratio(self.tn, self.tn + self.fp, "specificity")
    }

    pub fn precision(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp, "precision")
    }

    pub fn f1(&self) -> Result<f64> {
        let p = self.precision()?;
        let r = self.sensitivity()?;
        if p + r == 0.0 {
            return Err(Error::UndefinedMetric { metric: "f1" });
        }
        Ok(2.0 * p * r / (p + r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

/// All five rates; fails with the first undefined one.
pub fn confusion_metrics(c: &ConfusionCounts) -> Result<ConfusionReport> {
    Ok(ConfusionReport {
        accuracy: c.accuracy()?,
        sensitivity: c.sensitivity()?,
        specificity: c.specificity()?,
        precision: c.precision()?,
        f1: c.f1()?,
    })
}

pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Err(Error::UndefinedMetric { metric: "iou" });
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegEvalCase {
    pub model_mask: Mask,
    pub truth_mask: Mask,
}

/// Fraction of the true lesion area covered by the model mask.
pub fn overlap_over_truth(case: &SegEvalCase) -> Result<f64> {
    let truth = case.truth_mask.count();
    if truth == 0 {
        return Err(Error::UndefinedMetric {
            metric: "map_segmentation",
        });
    }
    Ok(case.model_mask.intersection_count(&case.truth_mask)? as f64 / truth as f64)
}

/// Mean over cases of `|A ∩ B| / |B|` with `A` the model mask and `B` the truth.
pub fn map_segmentation(cases: &[SegEvalCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "map_segmentation",
        });
    }
    let mut sum = 0.0;
    for c in cases {
        sum += overlap_over_truth(c)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Mean per-case IoU, the set-overlap reading of the same evaluation.
pub fn mean_iou(cases: &[SegEvalCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric { metric: "mean_iou" });
    }
    let mut sum = 0.0;
    for c in cases {
        sum += iou(&c.model_mask, &c.truth_mask)?;
    }
    Ok(sum / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredSample { score, label }
    }
}

fn class_totals(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let pos = samples.iter().filter(|s| s.label).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric { metric: "auc" });
    }
    if samples.iter().any(|s| s.score.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    Ok((pos, neg))
}

/// ROC vertices from `(0, 0)` to `(1, 1)`, one per distinct score threshold,
/// thresholds visited from the highest score down.
pub fn roc_points(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_totals(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_points`]. A tied group contributes a
/// diagonal segment, which is the half-credit tie rule of the Mann-Whitney
/// statistic, so the two agree exactly up to rounding.
pub fn auc_roc(samples: &[ScoredSample]) -> Result<f64> {
    let pts = roc_points(samples)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum())
}
