//! Desk-scale workflow: a crop classifier built on the micro network and a
//! mini detector with anchor, box and mask heads, both trained by SGD.

pub mod anchors;
pub mod classifier;
pub mod detector;
pub mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle};
use crate::nn::norm::{BatchNormParams, DEFAULT_BN_MOMENTUM};
use crate::rng::{derive_seed, Rng};

pub use anchors::{assign_targets, build_anchor_grid, AnchorGrid, Assignment};
pub use classifier::{
    evaluate_classifier, train_classifier, Classifier, ClassifierReport, ConstantScorer, LabelOracle, Scorer,
};
pub use detector::{
    evaluate_detector, paste_mask, train_detector, DetectorConfig, DetectorReport, MiniDetector, Segmenter, TruthOracle,
};
pub use optim::Sgd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub iou_pos_threshold: f64,
    pub iou_neg_threshold: f64,
    /// Proposals per image added to the mask rois; 0 trains masks on
    /// ground-truth boxes only.
    pub top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            iou_pos_threshold: 0.5,
            iou_neg_threshold: 0.3,
            top_k: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.iou_neg_threshold < self.iou_pos_threshold) {
            return Err(Error::config("negative IoU threshold must be below the positive one"));
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` cut into batches; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Guards a step's components; a non-finite value becomes a training error
/// carrying the location and all three components.
pub fn checked_bundle(epoch: usize, batch: usize, c: f64, b: f64, m: f64) -> Result<LossBundle> {
    if !(c.is_finite() && b.is_finite() && m.is_finite()) {
        return Err(Error::Training {
            epoch,
            batch,
            class_loss: c,
            box_loss: b,
            mask_loss: m,
        });
    }
    total_loss(c, b, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Built from the epoch means of the three components.
    pub train: LossBundle,
    pub metrics: Vec<Option<f64>>,
}

/// Per-step loss history plus one row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub metric_names: Vec<&'static str>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LossBundle>,
}

impl TrainLog {
    pub fn new(metric_names: Vec<&'static str>) -> Self {
        TrainLog {
            metric_names,
            epochs: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Every bundle logged anywhere satisfies the sum identity exactly.
    pub fn all_bundles_consistent(&self) -> bool {
        self.steps
            .iter()
            .chain(self.epochs.iter().map(|e| &e.train))
            .all(LossBundle::satisfies_sum_identity)
    }

    fn epoch_bundle(steps: &[LossBundle]) -> Result<LossBundle> {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&LossBundle) -> f64| steps.iter().map(f).fold(0.0, |a, b| a + b) / n;
        total_loss(
            mean(LossBundle::class_loss),
            mean(LossBundle::box_loss),
            mean(LossBundle::mask_loss),
        )
    }

    pub fn close_epoch(&mut self, epoch: usize, first_step: usize, metrics: Vec<Option<f64>>) -> Result<()> {
        let train = TrainLog::epoch_bundle(&self.steps[first_step..])?;
        self.epochs.push(EpochRecord { epoch, train, metrics });
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["epoch", "train_loss", "class_loss", "box_loss", "mask_loss"];
        header.extend(self.metric_names.iter().copied());
        out.write_record(&header).map_err(csv_error)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.train.total().to_string(),
                e.train.class_loss().to_string(),
                e.train.box_loss().to_string(),
                e.train.mask_loss().to_string(),
            ];
            row.extend(e.metrics.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
            out.write_record(&row).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_steps_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "total", "class_loss", "box_loss", "mask_loss"])
            .map_err(csv_error)?;
        for (i, s) in self.steps.iter().enumerate() {
            out.write_record([
                i.to_string(),
                s.total().to_string(),
                s.class_loss().to_string(),
                s.box_loss().to_string(),
                s.mask_loss().to_string(),
            ])
            .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::new(std::io::ErrorKind::Other, format!("{other:?}"))),
    }
}

/// Sets every running mean and variance to the average of the batch
/// statistics seen over `batches` forward passes in training mode, so
/// inference normalises with the current weights' population statistics.
/// `forward(i)` runs batch `i`; momentum is restored afterwards.
pub(crate) fn refresh_batch_norm<M>(
    model: &mut M,
    batches: usize,
    visit: fn(&mut M, &mut dyn FnMut(&mut BatchNormParams)),
    mut forward: impl FnMut(&mut M, usize) -> Result<()>,
) -> Result<()> {
    for i in 0..batches {
        // Cumulative mean: the first batch overwrites, later ones average in.
        let m = i as f64 / (i + 1) as f64;
        visit(model, &mut |p| p.momentum = m);
        forward(model, i)?;
    }
    visit(model, &mut |p| p.momentum = DEFAULT_BN_MOMENTUM);
    Ok(())
}

/// Best-so-far selection: higher primary metric wins, then higher
/// secondary; the earlier epoch keeps ties.
pub(crate) fn improves(candidate: (Option<f64>, Option<f64>), best: Option<(Option<f64>, Option<f64>)>) -> bool {
    let key = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
    match best {
        None => true,
        Some(b) => {
            let (c0, c1, b0, b1) = (key(candidate.0), key(candidate.1), key(b.0), key(b.1));
            c0 > b0 || (c0 == b0 && c1 > b1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_index_once() {
        let b = epoch_batches(19, 8, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 3]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..19).collect::<Vec<_>>());
        assert_eq!(epoch_batches(19, 8, 3, 0), b);
        assert_ne!(epoch_batches(19, 8, 3, 1), b);
    }

    #[test]
    fn log_csv_rows() {
        let mut log = TrainLog::new(vec!["val_accuracy"]);
        log.steps.push(total_loss(0.5, 0.0, 0.0).unwrap());
        log.steps.push(total_loss(0.25, 0.0, 0.0).unwrap());
        log.close_epoch(0, 0, vec![Some(0.75)]).unwrap();
        log.close_epoch(1, 2, vec![None]).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,class_loss,box_loss,mask_loss,val_accuracy\n0,0.375,0.375,0,0,0.75\n1,0,0,0,0,\n"
        );
        assert!(log.all_bundles_consistent());
    }

    #[test]
    fn non_finite_step_is_a_training_error() {
        match checked_bundle(3, 7, f64::NAN, 0.0, 1.0) {
            Err(Error::Training {
                epoch: 3,
                batch: 7,
                mask_loss,
                ..
            }) => assert_eq!(mask_loss, 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            iou_neg_threshold: 0.6,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
