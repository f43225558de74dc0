//! Fixed anchor grid and IoU-based target assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{encode_box, AnchorTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub image_size: (usize, usize),
    pub stride: usize,
    pub scales: Vec<f64>,
    /// Cell-major, then scale: index `(row * feat_w + col) * scales + s`.
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_size.0 / self.stride, self.image_size.1 / self.stride)
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Square anchors of each scale centred on every feature-cell centre.
pub fn build_anchor_grid(image_size: (usize, usize), stride: usize, scales: &[f64]) -> Result<AnchorGrid> {
    let (h, w) = image_size;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::config(format!("stride {stride} does not divide {h}x{w}")));
    }
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config(
            "anchor scales must be a non-empty list of positive sides",
        ));
    }
    let (fh, fw) = (h / stride, w / stride);
    let mut anchors = Vec::with_capacity(fh * fw * scales.len());
    for r in 0..fh {
        for c in 0..fw {
            let cx = (c as f64 + 0.5) * stride as f64;
            let cy = (r as f64 + 0.5) * stride as f64;
            for &s in scales {
                anchors.push(BBox::from_center(cx, cy, s, s));
            }
        }
    }
    Ok(AnchorGrid {
        image_size,
        stride,
        scales: scales.to_vec(),
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    /// Object anchor for ground truth `gt`.
    Positive {
        gt: usize,
        target: AnchorTarget,
    },
    Negative,
    /// Between the thresholds; left out of both loss sums.
    Ignored,
}

impl Assignment {
    pub fn target(&self) -> Option<AnchorTarget> {
        match self {
            Assignment::Positive { target, .. } => Some(*target),
            Assignment::Negative => Some(AnchorTarget::background()),
            Assignment::Ignored => None,
        }
    }
}

/// Positive at IoU >= `pos` with some box, or as the best anchor of a box
/// (lowest index on ties, boxes claiming in order); negative at max IoU
/// <= `neg`; ignored otherwise.
pub fn assign_targets(grid: &AnchorGrid, gt: &[BBox], pos: f64, neg: f64) -> Result<Vec<Assignment>> {
    if !(neg < pos) {
        return Err(Error::config(format!(
            "negative threshold {neg} must be below positive {pos}"
        )));
    }
    let n = grid.anchors.len();
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (i, a) in grid.anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = a.iou(g);
            if iou > best_gt[i].1 {
                best_gt[i] = (j, iou);
            }
        }
    }
    // Each box claims its best still-unclaimed anchor.
    let mut forced: Vec<Option<usize>> = vec![None; n];
    for (j, g) in gt.iter().enumerate() {
        let mut best = (usize::MAX, 0.0f64);
        for (i, a) in grid.anchors.iter().enumerate() {
            let iou = a.iou(g);
            if forced[i].is_none() && iou > best.1 {
                best = (i, iou);
            }
        }
        if best.0 != usize::MAX {
            forced[best.0] = Some(j);
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (j, iou) = best_gt[i];
        let gt_index = forced[i].or((!gt.is_empty() && iou >= pos).then_some(j));
        out.push(match gt_index {
            Some(j) => Assignment::Positive {
                gt: j,
                target: AnchorTarget::object(encode_box(&gt[j], &grid.anchors[i])?),
            },
            None if iou <= neg => Assignment::Negative,
            None => Assignment::Ignored,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn grid_examples() {
        let g = build_anchor_grid((64, 64), 8, &[12.0, 20.0, 32.0]).unwrap();
        assert_eq!(g.len(), 192);
        let centres: Vec<f64> = (0..8).map(|c| g.anchors[c * 3].center().0).collect();
        assert_eq!(centres, vec![4.0, 12.0, 20.0, 28.0, 36.0, 44.0, 52.0, 60.0]);
        let one = build_anchor_grid((64, 64), 64, &[30.0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.anchors[0].center(), (32.0, 32.0));
        assert!(build_anchor_grid((64, 64), 7, &[10.0]).is_err());
    }

    #[test]
    fn assignment_examples() {
        let g = build_anchor_grid((64, 64), 8, &[16.0]).unwrap();
        let gt = g.anchors[27];
        let a = assign_targets(&g, &[gt], 0.5, 0.3).unwrap();
        match a[27] {
            Assignment::Positive { gt: 0, target } => assert_eq!(target.t_star, [0.0; 4]),
            other => panic!("{other:?}"),
        }
        let none = assign_targets(&g, &[], 0.5, 0.3).unwrap();
        assert!(none.iter().all(|x| *x == Assignment::Negative));
        assert!(assign_targets(&g, &[], 0.3, 0.3).is_err());
    }

    #[test]
    fn matches_iou_matrix_oracle() {
        let g = build_anchor_grid((64, 64), 8, &[12.0, 20.0, 32.0]).unwrap();
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let gt: Vec<BBox> = (0..1 + rng.below(3))
                .map(|_| {
                    let w = rng.range(3.0, 30.0);
                    let h = rng.range(3.0, 30.0);
                    BBox::from_center(rng.range(10.0, 54.0), rng.range(10.0, 54.0), w, h)
                })
                .collect();
            let got = assign_targets(&g, &gt, 0.5, 0.3).unwrap();
            let m: Vec<Vec<f64>> = g
                .anchors
                .iter()
                .map(|a| gt.iter().map(|b| a.iou(b)).collect())
                .collect();
            let mut forced: Vec<usize> = Vec::new();
            for j in 0..gt.len() {
                let mut best: Option<usize> = None;
                for i in 0..m.len() {
                    if m[i][j] > 0.0 && !forced.contains(&i) && best.map_or(true, |b| m[i][j] > m[b][j]) {
                        best = Some(i);
                    }
                }
                forced.extend(best);
            }
            for (i, row) in m.iter().enumerate() {
                let max = row.iter().cloned().fold(0.0, f64::max);
                let expect_pos = max >= 0.5 || forced.contains(&i);
                match got[i] {
                    Assignment::Positive { .. } => assert!(expect_pos, "anchor {i}"),
                    Assignment::Negative => assert!(!expect_pos && max <= 0.3),
                    Assignment::Ignored => assert!(!expect_pos && max > 0.3 && max < 0.5),
                }
            }
            for j in 0..gt.len() {
                assert!(got
                    .iter()
                    .any(|a| matches!(a, Assignment::Positive { gt, .. } if *gt == j)));
            }
        }
    }
}
