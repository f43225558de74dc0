//! Mini detector: a micro trunk (stem, one dense block, transition) scoring
//! a fixed anchor grid, plus a mask head on RoIAlign crops.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::anchors::{assign_targets, build_anchor_grid, AnchorGrid};
use super::{checked_bundle, csv_error, epoch_batches, improves, Sgd, TrainConfig, TrainLog};
use crate::densenet::{dense_block, stem, transition, transition_channels, Checkpoint, ConvLayer, Layer, Sequential};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::losses::{
    decode_box, detection_loss, detection_loss_backward, mask_loss, mask_loss_backward, AnchorPrediction, AnchorTarget,
    LossConfig,
};
use crate::metrics::{map_segmentation, mean_iou, overlap_over_truth, SegEvalCase};
use crate::nn::{sigmoid, upsample_nearest, upsample_nearest_backward, Mode};
use crate::rng::Rng;
use crate::roi::{roi_align, roi_align_backward, RoIBox, RoiSpec};
use crate::synth::{Case, Dataset};
use crate::tensor::{concat_channels, split_channels, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub input_channels: usize,
    pub init_channels: usize,
    pub growth_rate: usize,
    pub block_layers: usize,
    pub bottleneck_width: usize,
    pub compression: f64,
    /// Anchor sides in pixels.
    pub scales: Vec<f64>,
    pub head_channels: usize,
    pub mask_channels: usize,
    /// RoIAlign output side feeding the mask head.
    pub roi_size: usize,
    pub sampling_ratio: usize,
    pub mask_size: usize,
    /// Proposals kept per image at inference.
    pub proposals: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            input_channels: 1,
            init_channels: 16,
            growth_rate: 8,
            block_layers: 2,
            bottleneck_width: 4,
            compression: 0.5,
            scales: vec![16.0, 24.0, 32.0],
            head_channels: 32,
            mask_channels: 16,
            roi_size: 14,
            sampling_ratio: 2,
            mask_size: 28,
            proposals: 4,
            nms_iou: 0.5,
            score_threshold: 0.5,
        }
    }
}

/// Pixels per cell of the stem + block output.
pub const EARLY_STRIDE: usize = 4;
/// Pixels per cell of the anchor grid.
pub const ANCHOR_STRIDE: usize = 8;

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % ANCHOR_STRIDE != 0 {
            return Err(Error::config(format!(
                "detector image size {} must be a positive multiple of {ANCHOR_STRIDE}",
                self.image_size
            )));
        }
        if self.input_channels == 0
            || self.init_channels == 0
            || self.growth_rate == 0
            || self.block_layers == 0
            || self.bottleneck_width == 0
            || self.head_channels == 0
            || self.mask_channels == 0
            || self.proposals == 0
        {
            return Err(Error::config(
                "detector widths, depths and proposal count must be positive",
            ));
        }
        if self.roi_size == 0 || self.mask_size != 2 * self.roi_size {
            return Err(Error::config("mask size must be twice the roi size"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::config("nms IoU and score threshold must lie in [0, 1]"));
        }
        transition_channels(self.early_channels(), self.compression)?;
        RoiSpec::new(self.roi_size, self.roi_size, self.sampling_ratio)?;
        build_anchor_grid((self.image_size, self.image_size), ANCHOR_STRIDE, &self.scales)?;
        Ok(())
    }

    pub fn early_channels(&self) -> usize {
        self.init_channels + self.block_layers * self.growth_rate
    }

    /// Normalisers: every anchor for the class term, every anchor location
    /// for the box term.
    pub fn loss_config(&self) -> LossConfig {
        let cells = (self.image_size / ANCHOR_STRIDE).pow(2);
        LossConfig {
            n_cls: cells * self.scales.len(),
            n_box: cells,
            mask_size: self.mask_size,
            ..LossConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub anchor: usize,
    pub score: f64,
    pub bbox: BBox,
    /// `(1, 1, m, m)` probabilities in the proposal frame.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub anchors: Vec<AnchorPrediction>,
    /// Top proposals by objectness, best first.
    pub proposals: Vec<Proposal>,
}

struct MaskForward {
    rois: Vec<RoIBox>,
    early_shape: Shape,
    hidden_shape: Shape,
    probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct MiniDetector {
    config: DetectorConfig,
    grid: AnchorGrid,
    early: Sequential,
    late: Sequential,
    shared: Sequential,
    objectness: Layer,
    deltas: Layer,
    mask_in: Sequential,
    mask_out: Layer,
}

fn image_roi(batch_index: usize, b: &BBox, stride: usize) -> RoIBox {
    RoIBox::from_image_box(batch_index, b, stride as f64)
}

impl MiniDetector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = Rng::new(seed);
        let mut early = Sequential::new();
        for (name, layer) in stem(c.input_channels, c.init_channels, &mut rng) {
            early.push(name, layer);
        }
        let block = dense_block(
            c.init_channels,
            c.block_layers,
            c.growth_rate,
            c.bottleneck_width,
            &mut rng,
        );
        early.push("block1", Layer::DenseBlock(block));
        let ce = c.early_channels();
        let late = transition(ce, c.compression, &mut rng)?;
        let cl = transition_channels(ce, c.compression)?;
        let a = c.scales.len();
        let shared = Sequential::new()
            .with(
                "rpn.conv",
                Layer::Conv(ConvLayer::he(c.head_channels, cl, 3, 1, 1, &mut rng)),
            )
            .with("rpn.relu", Layer::relu());
        let objectness = Layer::Conv(ConvLayer::he(a, c.head_channels, 1, 1, 0, &mut rng));
        let deltas = Layer::Conv(ConvLayer::he(4 * a, c.head_channels, 1, 1, 0, &mut rng));
        let mask_in = Sequential::new()
            .with(
                "mask.conv1",
                Layer::Conv(ConvLayer::he(c.mask_channels, ce + c.input_channels, 3, 1, 1, &mut rng)),
            )
            .with("mask.relu", Layer::relu());
        let mask_out = Layer::Conv(ConvLayer::he(1, c.mask_channels, 3, 1, 1, &mut rng));
        let grid = build_anchor_grid((c.image_size, c.image_size), ANCHOR_STRIDE, &c.scales)?;
        Ok(MiniDetector {
            config: c.clone(),
            grid,
            early,
            late,
            shared,
            objectness,
            deltas,
            mask_in,
            mask_out,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s.n == 0 || (s.c, s.h, s.w) != (c.input_channels, c.image_size, c.image_size) {
            return Err(Error::shape(format!(
                "detector expects (N, {0}, {1}, {1}) images, got {s}",
                c.input_channels, c.image_size
            )));
        }
        Ok(())
    }

    /// Early features, objectness logits `(N, A, fh, fw)` and box deltas
    /// `(N, 4A, fh, fw)`.
    fn forward_trunk(&mut self, images: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(images)?;
        let early = self.early.forward(images, mode)?;
        let late = self.late.forward(&early, mode)?;
        let hidden = self.shared.forward(&late, mode)?;
        let logits = self.objectness.forward(&hidden, mode)?;
        let deltas = self.deltas.forward(&hidden, mode)?;
        Ok((early, logits, deltas))
    }

    fn anchor_predictions(&self, logits: &Tensor, deltas: &Tensor, n: usize) -> Vec<AnchorPrediction> {
        let a = self.grid.per_cell();
        let (fh, fw) = self.grid.feature_size();
        let mut out = Vec::with_capacity(self.grid.len());
        for r in 0..fh {
            for c in 0..fw {
                for s in 0..a {
                    let mut t = [0.0; 4];
                    for (j, tj) in t.iter_mut().enumerate() {
                        *tj = deltas.at(n, s * 4 + j, r, c);
                    }
                    out.push(AnchorPrediction {
                        p: sigmoid(logits.at(n, s, r, c)),
                        t,
                    });
                }
            }
        }
        out
    }

    fn anchor_index(&self, i: usize) -> (usize, usize, usize) {
        let a = self.grid.per_cell();
        let fw = self.grid.feature_size().1;
        let cell = i / a;
        (i % a, cell / fw, cell % fw)
    }

    fn forward_masks(
        &mut self,
        early: &Tensor,
        images: &Tensor,
        boxes: &[(usize, BBox)],
        mode: Mode,
    ) -> Result<MaskForward> {
        let c = &self.config;
        let spec = RoiSpec::new(c.roi_size, c.roi_size, c.sampling_ratio)?;
        let rois: Vec<RoIBox> = boxes.iter().map(|(n, b)| image_roi(*n, b, EARLY_STRIDE)).collect();
        let pixel_rois: Vec<RoIBox> = boxes.iter().map(|(n, b)| image_roi(*n, b, 1)).collect();
        let feat = roi_align(early, &rois, &spec)?;
        let pix = roi_align(images, &pixel_rois, &spec)?;
        let x = concat_channels(&[&feat, &pix])?;
        let hidden = self.mask_in.forward(&x, mode)?;
        let up = upsample_nearest(&hidden, 2);
        let logits = self.mask_out.forward(&up, mode)?;
        Ok(MaskForward {
            rois,
            early_shape: early.shape(),
            hidden_shape: hidden.shape(),
            probs: logits.map(sigmoid),
        })
    }

    /// Gradient of the mask head with respect to the early features.
    fn backward_masks(&mut self, fwd: &MaskForward, grad_probs: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let grad_logits = grad_probs.zip_map(&fwd.probs, |g, p| g * p * (1.0 - p))?;
        let g_up = self.mask_out.backward(&grad_logits)?;
        let g_hidden = upsample_nearest_backward(fwd.hidden_shape, 2, &g_up)?;
        let g_x = self.mask_in.backward(&g_hidden)?;
        let bands = split_channels(&g_x, &[c.early_channels(), c.input_channels])?;
        let spec = RoiSpec::new(c.roi_size, c.roi_size, c.sampling_ratio)?;
        roi_align_backward(fwd.early_shape, &fwd.rois, &spec, &bands[0])
    }

    /// Top-`k` anchors of one image by objectness (lowest index on ties),
    /// with decoded boxes clipped to the image.
    fn top_proposals(&self, preds: &[AnchorPrediction], k: usize) -> Result<Vec<(usize, f64, BBox)>> {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].p.total_cmp(&preds[a].p).then(a.cmp(&b)));
        let size = self.config.image_size as f64;
        order
            .into_iter()
            .take(k)
            .map(|i| {
                Ok((
                    i,
                    preds[i].p,
                    decode_box(&preds[i].t, &self.grid.anchors[i])?.clip(size, size),
                ))
            })
            .collect()
    }

    /// Per-anchor outputs, then the top-`k` proposals with their masks.
    pub fn detect(&mut self, images: &Tensor, top_k: usize) -> Result<Vec<Detection>> {
        let (early, logits, deltas) = self.forward_trunk(images, Mode::Infer)?;
        let n = images.shape().n;
        let mut anchors = Vec::with_capacity(n);
        let mut boxes = Vec::new();
        let mut picks = Vec::with_capacity(n);
        for b in 0..n {
            let preds = self.anchor_predictions(&logits, &deltas, b);
            let top = self.top_proposals(&preds, top_k)?;
            boxes.extend(top.iter().map(|t| (b, t.2)));
            picks.push(top);
            anchors.push(preds);
        }
        let masks = if boxes.is_empty() {
            None
        } else {
            Some(self.forward_masks(&early, images, &boxes, Mode::Infer)?.probs)
        };
        let mut r = 0;
        let mut out = Vec::with_capacity(n);
        for (preds, top) in anchors.into_iter().zip(picks) {
            let mut proposals = Vec::with_capacity(top.len());
            for (anchor, score, bbox) in top {
                let mask = masks
                    .as_ref()
                    .map(|m| m.sample(r))
                    .unwrap_or_else(|| Tensor::zeros(Shape::new(1, 1, 0, 0)));
                r += 1;
                proposals.push(Proposal {
                    anchor,
                    score,
                    bbox,
                    mask,
                });
            }
            out.push(Detection {
                anchors: preds,
                proposals,
            });
        }
        Ok(out)
    }

    /// Forward pass, the three loss components for the batch and, when
    /// `backward` is set, parameter gradients accumulated in the layers.
    /// Mask rois are the ground-truth boxes plus, when `proposals > 0`, the
    /// top proposals that match a lesion at the positive threshold.
    pub fn loss(
        &mut self,
        batch: &DetectorBatch,
        train: &TrainConfig,
        proposals: usize,
        backward: bool,
    ) -> Result<(f64, f64, f64)> {
        let n = batch.images.shape().n;
        if n == 0 || batch.boxes.len() != n || batch.masks.len() != n {
            return Err(Error::shape(
                "detector batch needs one box list and mask list per image",
            ));
        }
        let loss_cfg = self.config.loss_config();
        let (early, logits, deltas) = self.forward_trunk(&batch.images, Mode::Train)?;
        let inv_n = 1.0 / n as f64;
        let mut class_loss = 0.0;
        let mut box_loss = 0.0;
        let mut g_logits = Tensor::zeros(logits.shape());
        let mut g_deltas = Tensor::zeros(deltas.shape());
        let mut mask_rois: Vec<(usize, BBox, usize)> = Vec::new();
        for b in 0..n {
            let preds = self.anchor_predictions(&logits, &deltas, b);
            let assigned = assign_targets(
                &self.grid,
                &batch.boxes[b],
                train.iou_pos_threshold,
                train.iou_neg_threshold,
            )?;
            let mut used_preds = Vec::new();
            let mut used_targets: Vec<AnchorTarget> = Vec::new();
            let mut used_index = Vec::new();
            for (i, a) in assigned.iter().enumerate() {
                if let Some(t) = a.target() {
                    used_preds.push(preds[i]);
                    used_targets.push(t);
                    used_index.push(i);
                }
            }
            let (c, bx) = detection_loss(&used_preds, &used_targets, &loss_cfg)?;
            class_loss += c * inv_n;
            box_loss += bx * inv_n;
            if backward {
                let grads = detection_loss_backward(&used_preds, &used_targets, &loss_cfg)?;
                for (g, (&i, p)) in grads.iter().zip(used_index.iter().zip(&used_preds)) {
                    let (s, r, c) = self.anchor_index(i);
                    g_logits.set(b, s, r, c, g.p * p.p * (1.0 - p.p) * inv_n);
                    for j in 0..4 {
                        g_deltas.set(b, s * 4 + j, r, c, g.t[j] * inv_n);
                    }
                }
            }
            for (j, gt) in batch.boxes[b].iter().enumerate() {
                mask_rois.push((b, *gt, j));
            }
            if proposals > 0 {
                for (_, _, pb) in self.top_proposals(&preds, proposals)? {
                    let best = batch.boxes[b].iter().enumerate().map(|(j, g)| (j, g.iou(&pb))).fold(
                        None,
                        |acc: Option<(usize, f64)>, x| match acc {
                            Some(a) if a.1 >= x.1 => Some(a),
                            _ => Some(x),
                        },
                    );
                    if let Some((j, iou)) = best {
                        if iou >= train.iou_pos_threshold && pb.width() > 0.0 && pb.height() > 0.0 {
                            mask_rois.push((b, pb, j));
                        }
                    }
                }
            }
        }

        let mut m_loss = 0.0;
        let mut g_early_mask = None;
        if !mask_rois.is_empty() {
            let boxes: Vec<(usize, BBox)> = mask_rois.iter().map(|(b, bx, _)| (*b, *bx)).collect();
            let fwd = self.forward_masks(&early, &batch.images, &boxes, Mode::Train)?;
            let m = self.config.mask_size;
            let target_spec = RoiSpec::new(m, m, self.config.sampling_ratio)?;
            let inv_r = 1.0 / mask_rois.len() as f64;
            let mut g_probs = Vec::with_capacity(mask_rois.len());
            for (r, (b, bx, j)) in mask_rois.iter().enumerate() {
                let target_map = roi_align(&batch.masks[*b][*j], &[image_roi(0, bx, 1)], &target_spec)?;
                let target = Mask::from_tensor(&target_map, 0.5);
                let pred = fwd.probs.sample(r);
                m_loss += mask_loss(&pred, &target, &loss_cfg)? * inv_r;
                if backward {
                    let mut g = mask_loss_backward(&pred, &target, &loss_cfg)?;
                    g.scale(inv_r);
                    g_probs.push(g);
                }
            }
            if backward {
                let refs: Vec<&Tensor> = g_probs.iter().collect();
                g_early_mask = Some(self.backward_masks(&fwd, &Tensor::stack(&refs)?)?);
            }
        }

        if backward {
            let mut g_hidden = self.objectness.backward(&g_logits)?;
            g_hidden.add_assign(&self.deltas.backward(&g_deltas)?)?;
            let g_late = self.shared.backward(&g_hidden)?;
            let mut g_early = self.late.backward(&g_late)?;
            if let Some(g) = g_early_mask {
                g_early.add_assign(&g)?;
            }
            self.early.backward(&g_early)?;
        }
        Ok((class_loss, box_loss, m_loss))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        self.early.visit_params(f);
        self.late.visit_params(f);
        self.shared.visit_params(f);
        self.objectness.visit_params(f);
        self.deltas.visit_params(f);
        self.mask_in.visit_params(f);
        self.mask_out.visit_params(f);
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.early.visit_state(f);
        self.late.visit_state(f);
        self.shared.visit_state(f);
        self.objectness.visit_state(f);
        self.deltas.visit_state(f);
        self.mask_in.visit_state(f);
        self.mask_out.visit_state(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |w, _| n += w.len());
        n
    }

    pub fn state_tensors(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_state(&mut |t| out.push(t.clone()));
        out
    }

    pub fn load_state(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut shapes = Vec::new();
        self.visit_state(&mut |t| shapes.push(t.shape()));
        if shapes.len() != tensors.len() {
            return Err(Error::shape(format!(
                "detector holds {} state tensors, checkpoint has {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(tensors).enumerate() {
            if *s != t.shape() {
                return Err(Error::shape(format!(
                    "state tensor {i}: expected {s}, got {}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.iter();
        self.visit_state(&mut |t| {
            if let Some(src) = it.next() {
                *t = src.clone();
            }
        });
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        let header = DetectorHeader {
            kind: DETECTOR_KIND.into(),
            detector: self.config.clone(),
        };
        Ok(Checkpoint {
            config: serde_json::to_value(header)?,
            tensors: self.state_tensors(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: DetectorHeader = serde_json::from_value(ckpt.config.clone())?;
        if header.kind != DETECTOR_KIND {
            return Err(Error::config(format!(
                "checkpoint holds a {}, not a detector",
                header.kind
            )));
        }
        let mut d = MiniDetector::new(&header.detector, 0)?;
        d.load_state(&ckpt.tensors)?;
        Ok(d)
    }
}

pub const DETECTOR_KIND: &str = "detector";

#[derive(Serialize, Deserialize)]
struct DetectorHeader {
    kind: String,
    detector: DetectorConfig,
}

/// Stacked images with their lesion boxes and full-frame mask maps.
#[derive(Debug, Clone)]
pub struct DetectorBatch {
    pub images: Tensor,
    pub boxes: Vec<Vec<BBox>>,
    /// `(1, 1, H, W)` 0/1 maps, one per lesion.
    pub masks: Vec<Vec<Tensor>>,
}

impl DetectorBatch {
    pub fn from_cases(cases: &[&Case]) -> Result<Self> {
        let images: Vec<&Tensor> = cases.iter().map(|c| &c.phantom.image).collect();
        Ok(DetectorBatch {
            images: Tensor::stack(&images)?,
            boxes: cases
                .iter()
                .map(|c| c.phantom.lesions.iter().map(|l| l.bbox).collect())
                .collect(),
            masks: cases
                .iter()
                .map(|c| c.phantom.lesions.iter().map(|l| l.mask.to_tensor()).collect())
                .collect(),
        })
    }
}

/// Greedy suppression: indices into `boxes` (sorted best first) that
/// survive, in order.
pub fn nms(boxes: &[BBox], iou: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if keep.iter().all(|&k| boxes[k].iou(b) <= iou) {
            keep.push(i);
        }
    }
    keep
}

/// Nearest-neighbour projection of an `m x m` probability map onto the
/// image: a pixel is set when its centre lies in `bbox` and the bin it
/// falls in is at least `threshold`.
pub fn paste_mask(probs: &Tensor, bbox: &BBox, height: usize, width: usize, threshold: f64) -> Result<Mask> {
    let s = probs.shape();
    if s.n * s.c != 1 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!("paste expects a single non-empty map, got {s}")));
    }
    let (bw, bh) = (bbox.width(), bbox.height());
    let mut out = Mask::empty(height, width);
    if !(bw > 0.0 && bh > 0.0) {
        return Ok(out);
    }
    for r in 0..height {
        let y = r as f64 + 0.5;
        if y < bbox.y1 || y >= bbox.y2 {
            continue;
        }
        let i = (((y - bbox.y1) / bh * s.h as f64) as usize).min(s.h - 1);
        for c in 0..width {
            let x = c as f64 + 0.5;
            if x < bbox.x1 || x >= bbox.x2 {
                continue;
            }
            let j = (((x - bbox.x1) / bw * s.w as f64) as usize).min(s.w - 1);
            if probs.at(0, 0, i, j) >= threshold {
                out.set(r, c, true);
            }
        }
    }
    Ok(out)
}

/// Anything that predicts one lesion mask per case.
pub trait Segmenter {
    fn segment(&mut self, cases: &[Case]) -> Result<Vec<Mask>>;
}

/// Returns the ground truth; the upper bound of every overlap metric.
pub struct TruthOracle;

fn truth_mask(case: &Case) -> Result<Mask> {
    let img = case.phantom.image.shape();
    let mut m = Mask::empty(img.h, img.w);
    for l in &case.phantom.lesions {
        m.union_with(&l.mask)?;
    }
    Ok(m)
}

impl Segmenter for TruthOracle {
    fn segment(&mut self, cases: &[Case]) -> Result<Vec<Mask>> {
        cases.iter().map(truth_mask).collect()
    }
}

impl Segmenter for MiniDetector {
    /// Proposals after suppression with objectness at least the score
    /// threshold (the best one if none is), pasted and merged.
    fn segment(&mut self, cases: &[Case]) -> Result<Vec<Mask>> {
        let size = self.config.image_size;
        let mut out = Vec::with_capacity(cases.len());
        for chunk in cases.chunks(16) {
            let refs: Vec<&Tensor> = chunk.iter().map(|c| &c.phantom.image).collect();
            let detections = self.detect(&Tensor::stack(&refs)?, self.config.proposals)?;
            for d in detections {
                let boxes: Vec<BBox> = d.proposals.iter().map(|p| p.bbox).collect();
                let kept = nms(&boxes, self.config.nms_iou);
                let mut mask = Mask::empty(size, size);
                for (rank, &k) in kept.iter().enumerate() {
                    let p = &d.proposals[k];
                    if rank == 0 || p.score >= self.config.score_threshold {
                        mask.union_with(&paste_mask(&p.mask, &p.bbox, size, size, 0.5)?)?;
                    }
                }
                out.push(mask);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub seed_id: u64,
    pub overlap: f64,
    pub iou: f64,
    pub predicted_pixels: usize,
    pub truth_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    /// Mean detected overlap over true lesion size.
    pub map: f64,
    pub mean_iou: f64,
    pub cases: Vec<SegmentationRecord>,
}

pub const DETECTOR_METRICS: [&str; 2] = ["map", "mean_iou"];

impl DetectorReport {
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cases", "map", "mean_iou"]).map_err(csv_error)?;
        out.write_record([
            self.cases.len().to_string(),
            self.map.to_string(),
            self.mean_iou.to_string(),
        ])
        .map_err(csv_error)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_cases_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cases {
            out.serialize(c).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn evaluate_detector(model: &mut dyn Segmenter, cases: &[Case]) -> Result<DetectorReport> {
    if cases.is_empty() {
        return Err(Error::domain("cannot evaluate an empty split"));
    }
    let predicted = model.segment(cases)?;
    let mut evals = Vec::with_capacity(cases.len());
    for (case, pred) in cases.iter().zip(predicted) {
        evals.push(SegEvalCase {
            model_mask: pred,
            truth_mask: truth_mask(case)?,
        });
    }
    let records = cases
        .iter()
        .zip(&evals)
        .map(|(c, e)| {
            Ok(SegmentationRecord {
                seed_id: c.phantom.seed_id,
                overlap: overlap_over_truth(e)?,
                iou: crate::metrics::iou(&e.model_mask, &e.truth_mask)?,
                predicted_pixels: e.model_mask.count(),
                truth_pixels: e.truth_mask.count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectorReport {
        map: map_segmentation(&evals)?,
        mean_iou: mean_iou(&evals)?,
        cases: records,
    })
}

pub struct DetectorRun {
    pub best: MiniDetector,
    pub best_epoch: Option<usize>,
    pub log: TrainLog,
}

/// One SGD step on a batch; returns the checked loss bundle components.
pub fn detector_step(
    det: &mut MiniDetector,
    opt: &mut Sgd,
    batch: &DetectorBatch,
    train: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<crate::losses::LossBundle> {
    det.zero_grad();
    let (c, b, m) = det.loss(batch, train, train.top_k, true)?;
    let bundle = checked_bundle(epoch, index, c, b, m)?;
    opt.step(|f| det.visit_params(f));
    Ok(bundle)
}

/// Epochs of SGD with a validation pass after each; returns the best epoch
/// by MAP, then mean IoU, or the initialisation with zero epochs.
pub fn train_detector(dataset: &Dataset, config: &DetectorConfig, train: &TrainConfig) -> Result<DetectorRun> {
    train.validate()?;
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(Error::config(
            "detector training needs non-empty train and validation splits",
        ));
    }
    if dataset.spec.image_size != config.image_size {
        return Err(Error::config(format!(
            "dataset images are {0}x{0}, detector expects {1}x{1}",
            dataset.spec.image_size, config.image_size
        )));
    }
    let mut det = MiniDetector::new(config, train.seed)?;
    let mut opt = Sgd::new(train.learning_rate, train.momentum);
    let mut log = TrainLog::new(vec!["val_map", "val_mean_iou"]);
    let mut best = det.clone();
    let mut best_key = None;
    let mut best_epoch = None;
    for epoch in 0..train.epochs {
        let first_step = log.steps.len();
        for (bi, idx) in epoch_batches(dataset.train.len(), train.batch_size, train.seed, epoch)
            .iter()
            .enumerate()
        {
            let cases: Vec<&Case> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let batch = DetectorBatch::from_cases(&cases)?;
            let bundle = detector_step(&mut det, &mut opt, &batch, train, epoch, bi)?;
            log.steps.push(bundle);
        }
        let report = evaluate_detector(&mut det, &dataset.validation)?;
        let key = (Some(report.map), Some(report.mean_iou));
        if improves(key, best_key) {
            best_key = Some(key);
            best = det.clone();
            best_epoch = Some(epoch);
        }
        log.close_epoch(epoch, first_step, vec![Some(report.map), Some(report.mean_iou)])?;
    }
    Ok(DetectorRun { best, best_epoch, log })
}
