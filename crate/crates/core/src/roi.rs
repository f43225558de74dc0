//! Region-of-interest feature extraction: quantized max pooling (RoIPool)
//! and bilinear-sampled averaging (RoIAlign).
//!
//! Coordinates are feature-map coordinates in which cell `(i, j)` is a point
//! sample at `x = j`, `y = i`. Box edges are inclusive point coordinates.
//! There is no spatial scale; callers convert from image space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoIBox {
    pub batch_index: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoIBox {
    pub fn new(batch_index: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        RoIBox {
            batch_index,
            x1,
            y1,
            x2,
            y2,
        }
    }

    /// Maps an image-space box (pixel `(r, c)` covering `[c, c + 1) x [r, r + 1)`)
    /// onto a feature map of the given stride, whose cell `j` samples the
    /// image at `x = (j + 0.5) * stride`.
    pub fn from_image_box(batch_index: usize, b: &BBox, stride: f64) -> Self {
        RoIBox::new(
            batch_index,
            b.x1 / stride - 0.5,
            b.y1 / stride - 0.5,
            b.x2 / stride - 0.5,
            b.y2 / stride - 0.5,
        )
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        RoIBox::new(self.batch_index, self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    fn validate(&self, batch: usize) -> Result<()> {
        if self.batch_index >= batch {
            return Err(Error::Index(format!(
                "roi batch index {} out of range for batch of {batch}",
                self.batch_index
            )));
        }
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite()) || self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::domain(format!(
                "malformed roi ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub out_h: usize,
    pub out_w: usize,
    /// Sample points per bin axis (RoIAlign only); 2 gives four points per bin.
    pub sampling_ratio: usize,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            out_h: 7,
            out_w: 7,
            sampling_ratio: 2,
        }
    }
}

impl RoiSpec {
    pub fn new(out_h: usize, out_w: usize, sampling_ratio: usize) -> Result<Self> {
        let spec = RoiSpec {
            out_h,
            out_w,
            sampling_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.out_h == 0 || self.out_w == 0 || self.sampling_ratio == 0 {
            return Err(Error::config(format!("invalid roi spec {self:?}")));
        }
        Ok(())
    }
}

fn check_inputs(features: &Tensor, rois: &[RoIBox], spec: &RoiSpec) -> Result<Shape> {
    spec.validate()?;
    let s = features.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("roi pooling over an empty feature map"));
    }
    for roi in rois {
        roi.validate(s.n)?;
    }
    Ok(Shape::new(rois.len(), s.c, spec.out_h, spec.out_w))
}

/// The four bilinear taps of one sample point, as plane offsets and weights.
type Taps = [(usize, f64); 4];

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let (hx, hy) = (1.0 - lx, 1.0 - ly);
    [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

/// Sample points of every bin of `roi`, bin-major then row-major.
pub fn sample_points(roi: &RoIBox, spec: &RoiSpec) -> Vec<Vec<(f64, f64)>> {
    let s = spec.sampling_ratio;
    let bin_w = (roi.x2 - roi.x1) / spec.out_w as f64;
    let bin_h = (roi.y2 - roi.y1) / spec.out_h as f64;
    let mut bins = Vec::with_capacity(spec.out_h * spec.out_w);
    for ph in 0..spec.out_h {
        for pw in 0..spec.out_w {
            let mut pts = Vec::with_capacity(s * s);
            for a in 0..s {
                let y = roi.y1 + (ph as f64 + (a as f64 + 0.5) / s as f64) * bin_h;
                for b in 0..s {
                    let x = roi.x1 + (pw as f64 + (b as f64 + 0.5) / s as f64) * bin_w;
                    pts.push((x, y));
                }
            }
            bins.push(pts);
        }
    }
    bins
}

fn roi_taps(roi: &RoIBox, spec: &RoiSpec, h: usize, w: usize) -> Vec<Vec<Taps>> {
    sample_points(roi, spec)
        .into_iter()
        .map(|pts| pts.into_iter().map(|(x, y)| bilinear_taps(x, y, h, w)).collect())
        .collect()
}

/// Bilinear value at `(x, y)` in lerp form, so equal taps return that value
/// bit for bit.
fn bilinear(plane: &[f64], x: f64, y: f64, h: usize, w: usize) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
    let (c, d) = (plane[y1 * w + x0], plane[y1 * w + x1]);
    let top = a + lx * (b - a);
    let bottom = c + lx * (d - c);
    top + ly * (bottom - top)
}

/// Each output bin is the mean of `sampling_ratio^2` bilinearly interpolated
/// sample points; samples are clamped to the map before interpolation. The
/// mean is accumulated incrementally, which keeps constant maps exact.
pub fn roi_align(features: &Tensor, rois: &[RoIBox], spec: &RoiSpec) -> Result<Tensor> {
    let os = check_inputs(features, rois, spec)?;
    let fs = features.shape();
    let mut out = Tensor::zeros(os);
    let bins = spec.out_h * spec.out_w;
    for (r, roi) in rois.iter().enumerate() {
        let points = sample_points(roi, spec);
        for c in 0..fs.c {
            let plane = features.plane(roi.batch_index, c);
            let base = (r * fs.c + c) * bins;
            for (bin, samples) in points.iter().enumerate() {
                let mut mean = 0.0;
                for (k, &(x, y)) in samples.iter().enumerate() {
                    mean += (bilinear(plane, x, y, fs.h, fs.w) - mean) / (k + 1) as f64;
                }
                out.data_mut()[base + bin] = mean;
            }
        }
    }
    Ok(out)
}

pub fn roi_align_backward(features_shape: Shape, rois: &[RoIBox], spec: &RoiSpec, grad_out: &Tensor) -> Result<Tensor> {
    let probe = Tensor::zeros(Shape::new(features_shape.n, 0, features_shape.h, features_shape.w));
    let os = check_inputs(&probe, rois, spec)?;
    let os = Shape::new(os.n, features_shape.c, os.h, os.w);
    grad_out.expect_shape(os, "roi_align_backward grad_out")?;
    let fs = features_shape;
    let norm = 1.0 / (spec.sampling_ratio * spec.sampling_ratio) as f64;
    let bins = spec.out_h * spec.out_w;
    let plane = fs.plane();
    let mut grad = Tensor::zeros(fs);
    for (r, roi) in rois.iter().enumerate() {
        let taps = roi_taps(roi, spec, fs.h, fs.w);
        for c in 0..fs.c {
            let gbase = (r * fs.c + c) * bins;
            let fbase = (roi.batch_index * fs.c + c) * plane;
            for (bin, samples) in taps.iter().enumerate() {
                let g = grad_out.data()[gbase + bin] * norm;
                if g == 0.0 {
                    continue;
                }
                for t in samples {
                    for &(idx, wt) in t {
                        grad.data_mut()[fbase + idx] += wt * g;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Integer cell range `[start, end)` of bin `i` out of `bins` over `cells`
/// quantized cells beginning at `origin`, clamped to the map and never empty.
fn pool_bin(origin: usize, cells: usize, i: usize, bins: usize, limit: usize) -> (usize, usize) {
    let start = origin + i * cells / bins;
    let end = origin + ((i + 1) * cells).div_ceil(bins);
    let start = start.min(limit - 1);
    let end = end.min(limit).max(start + 1);
    (start, end)
}

/// Quantized region span in cells: `floor(lo) ..= ceil(hi)`, clamped to the map.
fn quantize(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let max = (limit - 1) as f64;
    let q_lo = lo.floor().clamp(0.0, max) as usize;
    let q_hi = hi.ceil().clamp(0.0, max) as usize;
    (q_lo, q_hi.max(q_lo) - q_lo + 1)
}

/// RoIPool: quantize the region to whole cells, split it into integer bins
/// by floor/ceil edges and take the max of each bin. Also returns, per output
/// element, the flat feature offset of the winning cell.
pub fn roi_pool(features: &Tensor, rois: &[RoIBox], spec: &RoiSpec) -> Result<(Tensor, Vec<usize>)> {
    let os = check_inputs(features, rois, spec)?;
    let fs = features.shape();
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let x = features.data();
    for roi in rois {
        let (ox, wq) = quantize(roi.x1, roi.x2, fs.w);
        let (oy, hq) = quantize(roi.y1, roi.y2, fs.h);
        for c in 0..fs.c {
            let base = (roi.batch_index * fs.c + c) * fs.plane();
            for ph in 0..spec.out_h {
                let (r0, r1) = pool_bin(oy, hq, ph, spec.out_h, fs.h);
                for pw in 0..spec.out_w {
                    let (c0, c1) = pool_bin(ox, wq, pw, spec.out_w, fs.w);
                    let mut best = base + r0 * fs.w + c0;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            let idx = base + r * fs.w + col;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                }
            }
        }
    }
    for (o, &idx) in out.data_mut().iter_mut().zip(&argmax) {
        *o = x[idx];
    }
    Ok((out, argmax))
}

pub fn roi_pool_backward(features_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("argmax and grad_out lengths differ"));
    }
    let mut grad = Tensor::zeros(features_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        if idx >= grad.len() {
            return Err(Error::Index(format!("argmax offset {idx} outside the feature map")));
        }
        grad.data_mut()[idx] += g;
    }
    Ok(grad)
}
