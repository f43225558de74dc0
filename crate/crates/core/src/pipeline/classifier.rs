//! Crop classifier: a square window around the ground-truth lesion box is
//! resampled with RoIAlign and scored by the micro network.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{checked_bundle, csv_error, epoch_batches, improves, refresh_batch_norm, Sgd, TrainConfig, TrainLog};
use crate::densenet::{build_densenet, Checkpoint, DenseNetConfig, Network};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{auc_roc, roc_points, ConfusionCounts, ScoredSample};
use crate::nn::{softmax_row, Mode};
use crate::rng::{derive_seed, Rng};
use crate::roi::{roi_align, RoIBox, RoiSpec};
use crate::synth::{Case, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub size: usize,
    /// Context added on each side of the lesion box, pixels.
    pub margin: f64,
    /// Random flips and quarter turns of training crops.
    pub augment: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            size: 64,
            margin: 4.0,
            augment: true,
        }
    }
}

/// `(1, 1, size, size)` resample of the square window around `b`.
pub fn crop_input(image: &Tensor, b: &BBox, crop: &CropConfig) -> Result<Tensor> {
    let sq = b.squared(1.0, 2.0 * crop.margin);
    let roi = RoIBox::from_image_box(0, &sq, 1.0);
    roi_align(image, &[roi], &RoiSpec::new(crop.size, crop.size, 2)?)
}

/// One of the eight symmetries of the square: bit 0 flips columns, bit 1
/// flips rows, bit 2 transposes.
pub fn dihedral(t: &Tensor, k: usize) -> Tensor {
    let s = t.shape();
    debug_assert_eq!(s.h, s.w);
    let n = s.h;
    Tensor::from_fn(s, |b, c, mut r, mut q| {
        if k & 4 != 0 {
            std::mem::swap(&mut r, &mut q);
        }
        if k & 2 != 0 {
            r = n - 1 - r;
        }
        if k & 1 != 0 {
            q = n - 1 - q;
        }
        t.at(b, c, r, q)
    })
}

/// Mean softmax cross-entropy of `(N, C, 1, 1)` logits and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.n != labels.len() || s.plane() != 1 {
        return Err(Error::shape(format!("{} labels for logits {s}", labels.len())));
    }
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let inv = 1.0 / s.n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= s.c {
            return Err(Error::Index(format!("label {y} with {} classes", s.c)));
        }
        let row = &logits.data()[i * s.c..(i + 1) * s.c];
        let p = softmax_row(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (j, &pj) in p.iter().enumerate() {
            grad.data_mut()[i * s.c + j] = (pj - if j == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Anything that turns cases into malignancy scores in [0, 1].
pub trait Scorer {
    fn score_cases(&mut self, cases: &[Case]) -> Result<Vec<f64>>;
}

/// Leaks the label as the score; the upper bound of every metric.
pub struct LabelOracle;

impl Scorer for LabelOracle {
    fn score_cases(&mut self, cases: &[Case]) -> Result<Vec<f64>> {
        Ok(cases
            .iter()
            .map(|c| if c.label.is_malignant() { 1.0 } else { 0.0 })
            .collect())
    }
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score_cases(&mut self, cases: &[Case]) -> Result<Vec<f64>> {
        Ok(vec![self.0; cases.len()])
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: Network,
    pub crop: CropConfig,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    kind: String,
    network: DenseNetConfig,
    crop: CropConfig,
}

pub const CLASSIFIER_KIND: &str = "classifier";

impl Classifier {
    pub fn new(cfg: &DenseNetConfig, crop: CropConfig, seed: u64) -> Result<Self> {
        if cfg.input_size != (crop.size, crop.size) || cfg.input_channels != 1 || cfg.num_classes != 2 {
            return Err(Error::config(format!(
                "classifier needs a 1-channel, 2-class network on {0}x{0} crops",
                crop.size
            )));
        }
        Ok(Classifier {
            net: build_densenet(cfg, seed)?,
            crop,
        })
    }

    pub fn crop_case(&self, case: &Case) -> Result<Tensor> {
        let lesion = case
            .phantom
            .primary()
            .ok_or_else(|| Error::domain(format!("case {} has no lesion to crop", case.phantom.seed_id)))?;
        crop_input(&case.phantom.image, &lesion.bbox, &self.crop)
    }

    /// Malignancy probabilities of prepared crops, in inference mode.
    pub fn score_crops(&mut self, crops: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(32) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let logits = self.net.forward(&Tensor::stack(&refs)?, Mode::Infer)?;
            for row in logits.data().chunks(2) {
                out.push(softmax_row(row)[1]);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        let header = ClassifierHeader {
            kind: CLASSIFIER_KIND.into(),
            network: self.net.config().clone(),
            crop: self.crop.clone(),
        };
        Ok(Checkpoint {
            config: serde_json::to_value(header)?,
            tensors: self.net.state_tensors(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: ClassifierHeader = serde_json::from_value(ckpt.config.clone())?;
        if header.kind != CLASSIFIER_KIND {
            return Err(Error::config(format!(
                "checkpoint holds a {}, not a classifier",
                header.kind
            )));
        }
        let mut c = Classifier::new(&header.network, header.crop, 0)?;
        c.net.load_state(&ckpt.tensors)?;
        Ok(c)
    }
}

impl Scorer for Classifier {
    fn score_cases(&mut self, cases: &[Case]) -> Result<Vec<f64>> {
        let crops = cases.iter().map(|c| self.crop_case(c)).collect::<Result<Vec<_>>>()?;
        self.score_crops(&crops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub seed_id: u64,
    pub malignant: bool,
    pub score: f64,
}

/// Threshold-0.5 confusion metrics plus AUC. Undefined rates are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub predictions: Vec<Prediction>,
}

pub const CLASSIFIER_METRICS: [&str; 6] = ["accuracy", "sensitivity", "specificity", "precision", "f1", "auc"];

impl ClassifierReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::domain("cannot evaluate an empty split"));
        }
        let samples = ClassifierReport::samples(&predictions);
        let counts = ConfusionCounts::from_scores(&samples, 0.5);
        Ok(ClassifierReport {
            accuracy: counts.accuracy().ok(),
            sensitivity: counts.sensitivity().ok(),
            specificity: counts.specificity().ok(),
            precision: counts.precision().ok(),
            f1: counts.f1().ok(),
            auc: auc_roc(&samples).ok(),
            counts,
            predictions,
        })
    }

    fn samples(predictions: &[Prediction]) -> Vec<ScoredSample> {
        predictions
            .iter()
            .map(|p| ScoredSample::new(p.score, p.malignant))
            .collect()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        vec![
            self.accuracy,
            self.sensitivity,
            self.specificity,
            self.precision,
            self.f1,
            self.auc,
        ]
    }

    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["tp", "fp", "tn", "fn"];
        header.extend(CLASSIFIER_METRICS);
        out.write_record(&header).map_err(csv_error)?;
        let c = self.counts;
        let mut row: Vec<String> = [c.tp, c.fp, c.tn, c.fn_].iter().map(u64::to_string).collect();
        row.extend(
            self.values()
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        out.write_record(&row).map_err(csv_error)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_roc_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fpr", "tpr"]).map_err(csv_error)?;
        if let Ok(points) = roc_points(&ClassifierReport::samples(&self.predictions)) {
            for (f, t) in points {
                out.write_record([f.to_string(), t.to_string()]).map_err(csv_error)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_predictions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.predictions {
            out.serialize(p).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_predictions_csv(text: &str) -> Result<Vec<Prediction>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize()
            .map(|row| {
                row.map_err(|e| Error::Parse {
                    offset: e.position().map_or(0, |p| p.byte()),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

pub fn evaluate_classifier(scorer: &mut dyn Scorer, cases: &[Case]) -> Result<ClassifierReport> {
    if cases.is_empty() {
        return Err(Error::domain("cannot evaluate an empty split"));
    }
    let scores = scorer.score_cases(cases)?;
    let predictions = cases
        .iter()
        .zip(scores)
        .map(|(c, score)| Prediction {
            seed_id: c.phantom.seed_id,
            malignant: c.label.is_malignant(),
            score,
        })
        .collect();
    ClassifierReport::from_predictions(predictions)
}

fn validation_metrics(clf: &mut Classifier, crops: &[Tensor], cases: &[Case]) -> Result<ClassifierReport> {
    let scores = clf.score_crops(crops)?;
    let predictions = cases
        .iter()
        .zip(scores)
        .map(|(c, score)| Prediction {
            seed_id: c.phantom.seed_id,
            malignant: c.label.is_malignant(),
            score,
        })
        .collect();
    ClassifierReport::from_predictions(predictions)
}

/// Batch size of the end-of-epoch batch-norm statistics pass.
pub const STATISTICS_BATCH: usize = 64;

pub struct ClassifierRun {
    pub best: Classifier,
    pub best_epoch: Option<usize>,
    pub log: TrainLog,
}

/// Epochs of SGD over seeded shuffled batches. Each epoch closes with a
/// validation pass; the returned model is the best epoch by validation
/// accuracy, then AUC. With zero epochs it is the initialisation.
pub fn train_classifier(
    dataset: &Dataset,
    net_cfg: &DenseNetConfig,
    crop: &CropConfig,
    cfg: &TrainConfig,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(Error::config(
            "classifier training needs non-empty train and validation splits",
        ));
    }
    let mut clf = Classifier::new(net_cfg, crop.clone(), cfg.seed)?;
    let train_crops = dataset
        .train
        .iter()
        .map(|c| clf.crop_case(c))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = dataset
        .train
        .iter()
        .map(|c| usize::from(c.label.is_malignant()))
        .collect();
    let val_crops = dataset
        .validation
        .iter()
        .map(|c| clf.crop_case(c))
        .collect::<Result<Vec<_>>>()?;

    let metric_names: Vec<&'static str> = vec![
        "val_accuracy",
        "val_sensitivity",
        "val_specificity",
        "val_precision",
        "val_f1",
        "val_auc",
    ];
    let mut log = TrainLog::new(metric_names);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut best = clf.clone();
    let mut best_key = None;
    let mut best_epoch = None;
    for epoch in 0..cfg.epochs {
        let first_step = log.steps.len();
        let mut aug = Rng::new(derive_seed(cfg.seed ^ 0x5eed_a06d, epoch as u64));
        for (bi, batch) in epoch_batches(train_crops.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let inputs: Vec<Tensor> = batch
                .iter()
                .map(|&i| {
                    if crop.augment {
                        dihedral(&train_crops[i], aug.below(8))
                    } else {
                        train_crops[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let x = Tensor::stack(&refs)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            clf.net.zero_grad();
            let logits = clf.net.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            let bundle = checked_bundle(epoch, bi, loss, 0.0, 0.0)?;
            clf.net.backward(&grad)?;
            opt.step(|f| clf.net.visit_params(f));
            log.steps.push(bundle);
        }
        let chunks: Vec<&[Tensor]> = train_crops.chunks(STATISTICS_BATCH).collect();
        refresh_batch_norm(&mut clf.net, chunks.len(), Network::visit_batch_norm, |net, i| {
            let refs: Vec<&Tensor> = chunks[i].iter().collect();
            net.forward(&Tensor::stack(&refs)?, Mode::Train).map(drop)
        })?;
        let report = validation_metrics(&mut clf, &val_crops, &dataset.validation)?;
        let key = (report.accuracy, report.auc);
        if improves(key, best_key) {
            best_key = Some(key);
            best = clf.clone();
            best_epoch = Some(epoch);
        }
        let v = report.values();
        log.close_epoch(epoch, first_step, vec![v[0], v[1], v[2], v[3], v[4], v[5]])?;
    }
    Ok(ClassifierRun { best, best_epoch, log })
}
