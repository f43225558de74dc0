//! Multi-task detection loss: objectness cross-entropy, gated smooth-L1 box
//! regression and per-pixel mask cross-entropy, summed into one bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Classification normaliser (mini-batch size).
    pub n_cls: usize,
    /// Box normaliser (number of anchor locations).
    pub n_box: usize,
    pub mask_size: usize,
    pub prob_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            n_cls: 256,
            n_box: 2400,
            mask_size: 28,
            prob_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cls == 0 || self.n_box == 0 || self.mask_size == 0 {
            return Err(Error::config("loss normalisers and mask size must be positive"));
        }
        if !(self.prob_epsilon > 0.0 && self.prob_epsilon < 0.5) {
            return Err(Error::config("prob_epsilon must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub p_star: bool,
    /// Parameterized ground-truth box; only read when `p_star` is set.
    pub t_star: [f64; 4],
}

impl AnchorTarget {
    pub fn background() -> Self {
        AnchorTarget {
            p_star: false,
            t_star: [0.0; 4],
        }
    }

    pub fn object(t_star: [f64; 4]) -> Self {
        AnchorTarget { p_star: true, t_star }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPrediction {
    pub p: f64,
    pub t: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorPredictionGrad {
    pub p: f64,
    pub t: [f64; 4],
}

/// The three task losses and their sum. Only [`total_loss`] builds one, so
/// `total` is always exactly `class_loss + box_loss + mask_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    total: f64,
    class_loss: f64,
    box_loss: f64,
    mask_loss: f64,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn class_loss(&self) -> f64 {
        self.class_loss
    }

    pub fn box_loss(&self) -> f64 {
        self.box_loss
    }

    pub fn mask_loss(&self) -> f64 {
        self.mask_loss
    }

    pub fn satisfies_sum_identity(&self) -> bool {
        self.total == self.class_loss + self.box_loss + self.mask_loss
    }
}

pub fn total_loss(class_loss: f64, box_loss: f64, mask_loss: f64) -> Result<LossBundle> {
    for (name, v) in [("class", class_loss), ("box", box_loss), ("mask", mask_loss)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::domain(format!(
                "{name} loss must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(LossBundle {
        total: class_loss + box_loss + mask_loss,
        class_loss,
        box_loss,
        mask_loss,
    })
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Binary cross-entropy between a predicted probability and a binary label.
/// The prediction is clamped into `[eps, 1 - eps]` before the logs.
pub fn bce(p: f64, label: bool, eps: f64) -> Result<f64> {
    check_probability(p)?;
    let q = p.clamp(eps, 1.0 - eps);
    Ok(if label { -q.ln() } else { -(1.0 - q).ln() })
}

/// Derivative of [`bce`] with respect to `p`; zero inside the clamp region.
pub fn bce_grad(p: f64, label: bool, eps: f64) -> Result<f64> {
    check_probability(p)?;
    if p < eps || p > 1.0 - eps {
        return Ok(0.0);
    }
    Ok(if label { -1.0 / p } else { 1.0 / (1.0 - p) })
}

fn check_lengths(preds: &[AnchorPrediction], targets: &[AnchorTarget]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// `(class_loss, box_loss)`: summed cross-entropy over `n_cls`, and smooth-L1
/// over the four box components of object anchors only, over `n_box`.
pub fn detection_loss(preds: &[AnchorPrediction], targets: &[AnchorTarget], cfg: &LossConfig) -> Result<(f64, f64)> {
    check_lengths(preds, targets)?;
    let mut cls = 0.0;
    let mut bx = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        cls += bce(p.p, t.p_star, cfg.prob_epsilon)?;
        if t.p_star {
            bx += p.t.iter().zip(&t.t_star).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
        }
    }
    Ok((cls / cfg.n_cls as f64, bx / cfg.n_box as f64))
}

pub fn detection_loss_backward(
    preds: &[AnchorPrediction],
    targets: &[AnchorTarget],
    cfg: &LossConfig,
) -> Result<Vec<AnchorPredictionGrad>> {
    check_lengths(preds, targets)?;
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mut g = AnchorPredictionGrad {
                p: bce_grad(p.p, t.p_star, cfg.prob_epsilon)? / cfg.n_cls as f64,
                t: [0.0; 4],
            };
            if t.p_star {
                for j in 0..4 {
                    g.t[j] = smooth_l1_grad(p.t[j] - t.t_star[j]) / cfg.n_box as f64;
                }
            }
            Ok(g)
        })
        .collect()
}

fn check_mask(pred: &Tensor, target: &Mask, cfg: &LossConfig) -> Result<()> {
    let s = pred.shape();
    let m = cfg.mask_size;
    if s.n * s.c != 1 || (s.h, s.w) != (m, m) || (target.height(), target.width()) != (m, m) {
        return Err(Error::shape(format!(
            "mask loss expects {m}x{m} prediction and target, got {s} and {}x{}",
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy of the ground-truth class mask channel.
pub fn mask_loss(pred: &Tensor, target: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_mask(pred, target, cfg)?;
    let mut sum = 0.0;
    for (&p, &y) in pred.data().iter().zip(target.bits()) {
        sum += bce(p, y, cfg.prob_epsilon)?;
    }
    Ok(sum / pred.len() as f64)
}

pub fn mask_loss_backward(pred: &Tensor, target: &Mask, cfg: &LossConfig) -> Result<Tensor> {
    check_mask(pred, target, cfg)?;
    let inv = 1.0 / pred.len() as f64;
    let mut g = Tensor::zeros(pred.shape());
    for ((gv, &p), &y) in g.data_mut().iter_mut().zip(pred.data()).zip(target.bits()) {
        *gv = bce_grad(p, y, cfg.prob_epsilon)? * inv;
    }
    Ok(g)
}

fn check_extent(b: &BBox, what: &str) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::domain(format!(
            "{what} box must have positive width and height, got {}x{}",
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Centre-offset / log-scale parameterization of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    check_extent(anchor, "anchor")?;
    check_extent(gt, "ground-truth")?;
    let (cx, cy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (cx - ax) / aw,
        (cy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

pub fn decode_box(t: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    check_extent(anchor, "anchor")?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BBox::from_center(
        ax + t[0] * aw,
        ay + t[1] * ah,
        aw * t[2].exp(),
        ah * t[3].exp(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_gradient, max_relative_error, Shape};

    const EPS: f64 = 1e-7;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert_eq!(0.5 * 1.0f64 * 1.0, 1.0f64.abs() - 0.5);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-3.0), 2.5);
    }

    #[test]
    fn smooth_l1_slope_across_switch() {
        for x in [1.0, -1.0] {
            let h = 1e-4;
            let slope = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
            assert!((0.99..=1.01).contains(&slope.abs()), "{slope}");
        }
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            assert!(smooth_l1_grad(rng.range(-5.0, 5.0)).abs() <= 1.0);
        }
    }

    #[test]
    fn bce_values() {
        assert!(bce(1.0, true, EPS).unwrap() <= 1.1e-7);
        assert!((bce(0.5, true, EPS).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.5, false, EPS).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.0, true, EPS).unwrap() - 16.118_095_650_958_32).abs() < 1e-9);
        assert!(bce(1.5, true, EPS).is_err());
        assert!(bce(-0.1, false, EPS).is_err());
    }

    #[test]
    fn bce_gradcheck() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let p = rng.range(0.05, 0.95);
            for label in [true, false] {
                let h = 1e-6;
                let fd = (bce(p + h, label, EPS).unwrap() - bce(p - h, label, EPS).unwrap()) / (2.0 * h);
                let an = bce_grad(p, label, EPS).unwrap();
                assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-4);
            }
        }
    }

    fn seeded_anchors(rng: &mut Rng, n: usize) -> (Vec<AnchorPrediction>, Vec<AnchorTarget>) {
        let preds = (0..n)
            .map(|_| AnchorPrediction {
                p: rng.range(0.05, 0.95),
                t: [
                    rng.range(-2.0, 2.0),
                    rng.range(-2.0, 2.0),
                    rng.range(-2.0, 2.0),
                    rng.range(-2.0, 2.0),
                ],
            })
            .collect();
        let targets = (0..n)
            .map(|_| {
                if rng.uniform() < 0.5 {
                    AnchorTarget::object([
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                    ])
                } else {
                    AnchorTarget::background()
                }
            })
            .collect();
        (preds, targets)
    }

    #[test]
    fn detection_loss_examples() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(3);
        let (preds, _) = seeded_anchors(&mut rng, 10);
        let bg = vec![AnchorTarget::background(); 10];
        assert_eq!(detection_loss(&preds, &bg, &cfg).unwrap().1, 0.0);

        let one = [AnchorPrediction {
            p: 1.0,
            t: [0.1, 0.2, 0.3, 0.4],
        }];
        let tgt = [AnchorTarget::object([0.1, 0.2, 0.3, 0.4])];
        let (c, b) = detection_loss(&one, &tgt, &cfg).unwrap();
        assert!(c <= 1.1e-7 / 256.0 && b <= 1.1e-7 / 256.0);

        assert!(detection_loss(&preds, &bg[..9], &cfg).is_err());
    }

    #[test]
    fn detection_loss_matches_per_anchor_sum() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(4);
        let (preds, targets) = seeded_anchors(&mut rng, 10);
        let (c, b) = detection_loss(&preds, &targets, &cfg).unwrap();
        let mut c_sum = 0.0;
        let mut b_sum = 0.0;
        for (p, t) in preds.iter().zip(&targets) {
            let y = if t.p_star { 1.0 } else { 0.0 };
            c_sum += -(y * p.p.ln() + (1.0 - y) * (1.0 - p.p).ln());
            for j in 0..4 {
                let d: f64 = p.t[j] - t.t_star[j];
                let s = if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
                b_sum += y * s;
            }
        }
        assert!((c - c_sum / 256.0).abs() < 1e-12);
        assert!((b - b_sum / 2400.0).abs() < 1e-12);
    }

    #[test]
    fn background_box_predictions_are_ignored() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(5);
        let (mut preds, targets) = seeded_anchors(&mut rng, 20);
        let (_, before) = detection_loss(&preds, &targets, &cfg).unwrap();
        for (p, t) in preds.iter_mut().zip(&targets) {
            if !t.p_star {
                p.t = [100.0, -50.0, 7.0, 3.0];
            }
        }
        let (_, after) = detection_loss(&preds, &targets, &cfg).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn detection_loss_gradcheck() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(6);
        for _ in 0..5 {
            let (preds, targets) = seeded_anchors(&mut rng, 8);
            let grads = detection_loss_backward(&preds, &targets, &cfg).unwrap();
            let pack = |ps: &[AnchorPrediction]| {
                let mut v = Vec::new();
                for p in ps {
                    v.push(p.p);
                    v.extend_from_slice(&p.t);
                }
                Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v).unwrap()
            };
            let unpack = |t: &Tensor| -> Vec<AnchorPrediction> {
                t.data()
                    .chunks(5)
                    .map(|c| AnchorPrediction {
                        p: c[0],
                        t: [c[1], c[2], c[3], c[4]],
                    })
                    .collect()
            };
            let x = pack(&preds);
            let fd = finite_difference_gradient(
                |t| {
                    let (c, b) = detection_loss(&unpack(t), &targets, &cfg)?;
                    Ok(c + b)
                },
                &x,
                1e-6,
            )
            .unwrap();
            let mut an = Vec::new();
            for g in &grads {
                an.push(g.p);
                an.extend_from_slice(&g.t);
            }
            let an = Tensor::from_vec(x.shape(), an).unwrap();
            assert!(max_relative_error(&an, &fd).unwrap() < 1e-4);
        }
    }

    fn cfg_m(m: usize) -> LossConfig {
        LossConfig {
            mask_size: m,
            ..LossConfig::default()
        }
    }

    #[test]
    fn mask_loss_examples() {
        let target = Mask::from_fn(4, 4, |r, c| r < c);
        let perfect = target.to_tensor();
        assert!(mask_loss(&perfect, &target, &cfg_m(4)).unwrap() <= 1.1e-7);
        let half = Tensor::full(Shape::new(1, 1, 4, 4), 0.5);
        assert!((mask_loss(&half, &target, &cfg_m(4)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(mask_loss(&half, &target, &cfg_m(3)).is_err());

        let pred = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.9, 0.2, 0.6, 0.3]).unwrap();
        let t = Mask::from_bits(2, 2, vec![true, false, false, true]).unwrap();
        let hand = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.3f64.ln()) / 4.0;
        assert!((mask_loss(&pred, &t, &cfg_m(2)).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_complement_symmetry_and_gradcheck() {
        let mut rng = Rng::new(7);
        for _ in 0..5 {
            let pred = Tensor::uniform(Shape::new(1, 1, 5, 5), 0.05, 0.95, &mut rng);
            let target = Mask::from_fn(5, 5, |_, _| false);
            let target = Mask::from_bits(5, 5, target.bits().iter().map(|_| rng.uniform() < 0.5).collect()).unwrap();
            let comp_pred = pred.map(|p| 1.0 - p);
            let comp_target = Mask::from_bits(5, 5, target.bits().iter().map(|b| !b).collect()).unwrap();
            let a = mask_loss(&pred, &target, &cfg_m(5)).unwrap();
            let b = mask_loss(&comp_pred, &comp_target, &cfg_m(5)).unwrap();
            assert!((a - b).abs() < 1e-12);

            let an = mask_loss_backward(&pred, &target, &cfg_m(5)).unwrap();
            let fd = finite_difference_gradient(|t| mask_loss(t, &target, &cfg_m(5)), &pred, 1e-6).unwrap();
            assert!(max_relative_error(&an, &fd).unwrap() < 1e-4);
        }
    }

    #[test]
    fn total_loss_identity() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total(), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0).unwrap().total(), 6.0);
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let (a, b, c) = (rng.uniform(), rng.range(0.0, 10.0), rng.range(0.0, 1e-3));
            let bundle = total_loss(a, b, c).unwrap();
            assert_eq!(bundle.total(), a + b + c);
            assert!(bundle.satisfies_sum_identity());
        }
        assert!(total_loss(-1.0, 0.0, 0.0).is_err());
        assert!(total_loss(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn box_codec() {
        let b = BBox::new(3.0, 4.0, 10.0, 20.0);
        assert_eq!(encode_box(&b, &b).unwrap(), [0.0; 4]);
        assert_eq!(decode_box(&[0.0; 4], &b).unwrap(), b);
        let mut rng = Rng::new(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let gt = BBox::from_center(
                rng.range(0.0, 64.0),
                rng.range(0.0, 64.0),
                rng.range(1.0, 40.0),
                rng.range(1.0, 40.0),
            );
            let an = BBox::from_center(
                rng.range(0.0, 64.0),
                rng.range(0.0, 64.0),
                rng.range(1.0, 40.0),
                rng.range(1.0, 40.0),
            );
            let back = decode_box(&encode_box(&gt, &an).unwrap(), &an).unwrap();
            for (x, y) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-9, "{worst}");
        assert!(encode_box(&b, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(decode_box(&[0.0; 4], &BBox::new(0.0, 0.0, 1.0, -1.0)).is_err());
    }
}
