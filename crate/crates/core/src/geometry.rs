//! Axis-aligned boxes and binary masks in image coordinates.
//!
//! Image pixel `(row, col)` covers the continuous square
//! `[col, col + 1) x [row, row + 1)`, so a pixel centre sits at
//! `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Area IoU; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Square box with side `scale * max(w, h) + margin` around the same centre.
    pub fn squared(&self, scale: f64, margin: f64) -> BBox {
        let (cx, cy) = self.center();
        let side = scale * self.width().max(self.height()) + margin;
        BBox::from_center(cx, cy, side, side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{} mask bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Mask { height, width, bits }
    }

    /// Cells whose value is at least `threshold`. Uses sample 0, channel 0.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Mask {
        let s = t.shape();
        Mask {
            height: s.h,
            width: s.w,
            bits: t.plane(0, 0).iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask extents match")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_extents(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "mask extents {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.same_extents(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.same_extents(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.same_extents(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Tight pixel-edge bounds, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bounds = Some(match bounds {
                        None => (c, r, c, r),
                        Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }

    /// Number of unit edges between a set cell and an unset (or outside) cell.
    pub fn perimeter(&self) -> usize {
        let mut edges = 0;
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let neighbours = [
                    r.checked_sub(1).map(|rr| (rr, c)),
                    (r + 1 < self.height).then_some((r + 1, c)),
                    c.checked_sub(1).map(|cc| (r, cc)),
                    (c + 1 < self.width).then_some((r, c + 1)),
                ];
                edges += neighbours
                    .iter()
                    .filter(|n| match n {
                        Some((rr, cc)) => !self.get(*rr, *cc),
                        None => true,
                    })
                    .count();
            }
        }
        edges
    }
}
