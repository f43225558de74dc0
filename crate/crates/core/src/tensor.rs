//! Dense 4-axis tensors in row-major (N, C, H, W) order.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Element count that overflows `usize` is rejected here, once, so the
    /// rest of the code can multiply extents freely.
    pub fn checked_numel(&self) -> Result<usize> {
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or_else(|| Error::shape(format!("{self} overflows the index range")))
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} elements]", self.data.len())
        }
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let numel = shape.checked_numel()?;
        if data.len() != numel {
            return Err(Error::shape(format!(
                "{} elements supplied for shape {shape} ({numel} required)",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A (1, C, 1, 1) tensor holding a per-channel vector.
    pub fn vector(values: Vec<f64>) -> Self {
        let shape = Shape::new(1, values.len(), 1, 1);
        Tensor { shape, data: values }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.range(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal(shape: Shape, std: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel()).map(|_| std * rng.normal()).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous (H, W) plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.checked_numel()? != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copy of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack equally shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of an empty list"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for (i, p) in parts.iter().enumerate() {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(format!(
                    "stack part {i} has shape {s}, expected C/H/W of {first}"
                )));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Inner product of the flattened tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!("{what}: got {}, expected {shape}", self.shape)));
        }
        Ok(())
    }

    /// Reduce over `axes`, leaving each reduced axis with extent 1.
    pub fn reduce(&self, kind: Reduction, axes: &[Axis]) -> Result<Tensor> {
        if axes.is_empty() {
            return Err(Error::domain("reduce needs at least one axis"));
        }
        if kind == Reduction::Max && self.data.is_empty() {
            return Err(Error::domain("max over an empty tensor"));
        }
        let s = self.shape;
        let keep = |a: Axis, extent: usize| if axes.contains(&a) { 1 } else { extent };
        let out_shape = Shape::new(
            keep(Axis::N, s.n),
            keep(Axis::C, s.c),
            keep(Axis::H, s.h),
            keep(Axis::W, s.w),
        );
        let init = match kind {
            Reduction::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = Tensor::full(out_shape, init);
        let fold = |n: usize, extent: usize| if extent == 1 { 0 } else { n };
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let v = self.at(n, c, h, w);
                        let o = out.offset(
                            fold(n, out_shape.n),
                            fold(c, out_shape.c),
                            fold(h, out_shape.h),
                            fold(w, out_shape.w),
                        );
                        match kind {
                            Reduction::Max => out.data[o] = out.data[o].max(v),
                            _ => out.data[o] += v,
                        }
                    }
                }
            }
        }
        if kind == Reduction::Mean {
            let count = (s.numel() / out_shape.numel().max(1)) as f64;
            if count > 0.0 {
                out.scale(1.0 / count);
            }
        }
        Ok(out)
    }

    /// Writes the binary record: four little-endian u64 extents then the
    /// little-endian f64 payload.
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = self.shape;
        for e in [s.n, s.c, s.h, s.w] {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_record_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 8);
        self.write_record(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

/// Channel concatenation: part `i` lands in the band right after parts `0..i`.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels of an empty list"))?
        .shape;
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!(
                "concat part {i} has shape {s}, incompatible N/H/W with part 0 {first}"
            )));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.shape.c).sum();
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let plane = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            let band = p.shape.c * plane;
            data.extend_from_slice(&p.data[n * band..(n + 1) * band]);
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Inverse of [`concat_channels`].
pub fn split_channels(t: &Tensor, band_sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = t.shape;
    let total: usize = band_sizes.iter().sum();
    if total != s.c || band_sizes.contains(&0) {
        return Err(Error::shape(format!(
            "bands {band_sizes:?} do not partition {} channels",
            s.c
        )));
    }
    let plane = s.plane();
    let mut outs: Vec<Tensor> = band_sizes
        .iter()
        .map(|&c| Tensor {
            shape: Shape::new(s.n, c, s.h, s.w),
            data: Vec::with_capacity(s.n * c * plane),
        })
        .collect();
    for n in 0..s.n {
        let mut start = n * s.c * plane;
        for (out, &c) in outs.iter_mut().zip(band_sizes) {
            let len = c * plane;
            out.data.extend_from_slice(&t.data[start..start + len]);
            start += len;
        }
    }
    Ok(outs)
}

/// Central-difference gradient of a scalar function:
/// `g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape);
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation while perturbing element {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest relative error between two gradients, with denominator
/// `max(1, |reference|)`.
pub fn max_relative_error(analytic: &Tensor, reference: &Tensor) -> Result<f64> {
    analytic.expect_shape(reference.shape, "max_relative_error")?;
    Ok(analytic
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, r)| (a - r).abs() / r.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Byte cursor that remembers its offset so parse errors can say where
/// they happened.
pub struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        RecordReader { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn read_tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        let mut ext = [0usize; 4];
        for e in &mut ext {
            *e = usize::try_from(self.read_u64("tensor extent")?).map_err(|_| Error::Parse {
                offset: start as u64,
                message: "extent exceeds the platform index range".into(),
            })?;
        }
        let shape = Shape::new(ext[0], ext[1], ext[2], ext[3]);
        let numel = shape.checked_numel().map_err(|_| Error::Parse {
            offset: start as u64,
            message: format!("shape {shape} overflows"),
        })?;
        let bytes_len = numel.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: start as u64,
            message: format!("shape {shape} overflows"),
        })?;
        let payload = self.take(bytes_len, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor { shape, data })
    }
}


#[cfg(test)]
mod props {
    use super::{concat_channels, finite_difference_gradient, split_channels, Axis, Reduction, Shape, Tensor};
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_split_round_trip(seed in any::<u64>(), bands in prop::collection::vec(1usize..4, 1..5), n in 1usize..3) {
            let c: usize = bands.iter().sum();
            let t = Tensor::uniform(Shape::new(n, c, 2, 3), -5.0, 5.0, &mut Rng::new(seed));
            let parts = split_channels(&t, &bands).unwrap();
            let refs: Vec<&Tensor> = parts.iter().collect();
            prop_assert_eq!(concat_channels(&refs).unwrap(), t);
        }

        #[test]
        fn band_sums_add_up(seed in any::<u64>(), bands in prop::collection::vec(1usize..4, 1..5)) {
            let c: usize = bands.iter().sum();
            let t = Tensor::uniform(Shape::new(2, c, 3, 3), -1.0, 1.0, &mut Rng::new(seed));
            let all = [Axis::N, Axis::C, Axis::H, Axis::W];
            let whole = t.reduce(Reduction::Sum, &all).unwrap().data()[0];
            let parts: f64 = split_channels(&t, &bands).unwrap().iter()
                .map(|p| p.reduce(Reduction::Sum, &all).unwrap().data()[0]).sum();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
        }

        #[test]
        fn fd_of_linear_functional_is_coefficients(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let coeff = Tensor::uniform(Shape::new(1, 2, 2, 2), -3.0, 3.0, &mut rng);
            let x = Tensor::uniform(Shape::new(1, 2, 2, 2), -1.0, 1.0, &mut rng);
            let g = finite_difference_gradient(|t| coeff.dot(t), &x, 1e-4).unwrap();
            prop_assert!(g.max_abs_diff(&coeff).unwrap() < 1e-9);
        }
    }
}
