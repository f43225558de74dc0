use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Weights of a 2-D convolution. `kernels` is (K, D, kh, kw); `bias` is a
/// (1, K, 1, 1) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let k = kernels.shape().n;
        if k == 0 {
            return Err(Error::config("convolution needs at least one kernel"));
        }
        if bias.len() != k {
            return Err(Error::shape(format!("bias has {} entries for {k} kernels", bias.len())));
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        Ok(ConvParams {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal kernels (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_init(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let kernels = Tensor::normal(
            Shape::new(out_channels, in_channels, kernel, kernel),
            (2.0 / fan_in).sqrt(),
            rng,
        );
        ConvParams {
            kernels,
            bias: Tensor::vector(vec![0.0; out_channels]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape().c
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let k = self.kernels.shape();
        if input.c != k.c {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {}",
                k.c, input.c
            )));
        }
        let oh = out_extent(input.h, k.h, self.stride, self.padding)?;
        let ow = out_extent(input.w, k.w, self.stride, self.padding)?;
        Ok(Shape::new(input.n, k.n, oh, ow))
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }
}

/// `floor((size + 2 pad - window) / stride) + 1`, rejecting non-positive results.
pub fn out_extent(size: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if window == 0 || stride == 0 || padded < window {
        return Err(Error::shape(format!(
            "window {window} (stride {stride}, pad {pad}) does not fit extent {size}"
        )));
    }
    Ok((padded - window) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + tap - pad < size`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // o*stride >= pad - tap
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    // o*stride <= size - 1 + pad - tap
    let hi = if size + pad > tap {
        ((size - 1 + pad - tap) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Cross-correlation of the zero-padded input with each kernel plus its bias.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    let ks = p.kernels.shape();
    let (s, pad) = (p.stride, p.padding);
    let mut out = Tensor::zeros(os);
    let x = input.data();
    let wt = p.kernels.data();
    let bias = p.bias.data();
    let out_plane = os.plane();
    let in_plane = is.plane();
    let o = out.data_mut();
    for n in 0..is.n {
        for k in 0..ks.n {
            let ob = (n * os.c + k) * out_plane;
            let oplane = &mut o[ob..ob + out_plane];
            oplane.fill(bias[k]);
            for c in 0..ks.c {
                let xb = (n * is.c + c) * in_plane;
                let xplane = &x[xb..xb + in_plane];
                for kh in 0..ks.h {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, s, is.h, os.h);
                    for kw in 0..ks.w {
                        let wv = wt[((k * ks.c + c) * ks.h + kh) * ks.w + kw];
                        let (ow_lo, ow_hi) = valid_range(kw, pad, s, is.w, os.w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - pad;
                            let orow = &mut oplane[oh * os.w..(oh + 1) * os.w];
                            let xrow = &xplane[ih * is.w..(ih + 1) * is.w];
                            if s == 1 {
                                let iw0 = ow_lo + kw - pad;
                                let xs = &xrow[iw0..iw0 + (ow_hi - ow_lo)];
                                for (ov, xv) in orow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wv * xrow[ow * s + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input, kernels and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    grad_out.expect_shape(os, "conv2d_backward grad_out")?;
    let ks = p.kernels.shape();
    let (s, pad) = (p.stride, p.padding);
    let mut gin = Tensor::zeros(is);
    let mut gk = Tensor::zeros(ks);
    let mut gb = Tensor::zeros(p.bias.shape());
    let x = input.data();
    let wt = p.kernels.data();
    let g = grad_out.data();
    let out_plane = os.plane();
    let in_plane = is.plane();
    {
        let gbd = gb.data_mut();
        for n in 0..is.n {
            for k in 0..ks.n {
                let ob = (n * os.c + k) * out_plane;
                gbd[k] += g[ob..ob + out_plane].iter().sum::<f64>();
            }
        }
    }
    let gkd = gk.data_mut();
    let gid = gin.data_mut();
    for n in 0..is.n {
        for k in 0..ks.n {
            let ob = (n * os.c + k) * out_plane;
            let gplane = &g[ob..ob + out_plane];
            for c in 0..ks.c {
                let xb = (n * is.c + c) * in_plane;
                for kh in 0..ks.h {
                    let (oh_lo, oh_hi) = valid_range(kh, pad, s, is.h, os.h);
                    for kw in 0..ks.w {
                        let widx = ((k * ks.c + c) * ks.h + kh) * ks.w + kw;
                        let wv = wt[widx];
                        let (ow_lo, ow_hi) = valid_range(kw, pad, s, is.w, os.w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - pad;
                            let grow = &gplane[oh * os.w..(oh + 1) * os.w];
                            let xrow0 = xb + ih * is.w;
                            if s == 1 {
                                let iw0 = ow_lo + kw - pad;
                                let len = ow_hi - ow_lo;
                                let xs = &x[xrow0 + iw0..xrow0 + iw0 + len];
                                let gs = &grow[ow_lo..ow_hi];
                                for (gv, xv) in gs.iter().zip(xs) {
                                    acc += gv * xv;
                                }
                                let gi = &mut gid[xrow0 + iw0..xrow0 + iw0 + len];
                                for (giv, gv) in gi.iter_mut().zip(gs) {
                                    *giv += wv * gv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let xi = xrow0 + ow * s + kw - pad;
                                    acc += grow[ow] * x[xi];
                                    gid[xi] += wv * grow[ow];
                                }
                            }
                        }
                        gkd[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        kernels: gk,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    fn params(k: usize, d: usize, size: usize, stride: usize, pad: usize, seed: u64) -> ConvParams {
        let mut rng = Rng::new(seed);
        ConvParams::new(
            Tensor::uniform(Shape::new(k, d, size, size), -1.0, 1.0, &mut rng),
            Tensor::uniform(Shape::new(1, k, 1, 1), -1.0, 1.0, &mut rng),
            stride,
            pad,
        )
        .unwrap()
    }

    /// Triple loop over output position, channel and tap with explicit padding checks.
    fn naive(input: &Tensor, p: &ConvParams) -> Tensor {
        let is = input.shape();
        let ks = p.kernels.shape();
        let os = p.output_shape(is).unwrap();
        Tensor::from_fn(os, |n, k, oh, ow| {
            let mut acc = p.bias.data()[k];
            for c in 0..ks.c {
                for a in 0..ks.h {
                    for b in 0..ks.w {
                        let ih = (oh * p.stride + a) as isize - p.padding as isize;
                        let iw = (ow * p.stride + b) as isize - p.padding as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < is.h && (iw as usize) < is.w {
                            acc += p.kernels.at(k, c, a, b) * input.at(n, c, ih as usize, iw as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::uniform(Shape::new(2, 1, 5, 4), -1.0, 1.0, &mut Rng::new(1));
        let p = ConvParams::new(
            Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            Tensor::vector(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut Rng::new(2));
        let p = ConvParams::new(
            Tensor::zeros(Shape::new(3, 2, 3, 3)),
            Tensor::vector(vec![0.5, -1.0, 2.0]),
            1,
            1,
        )
        .unwrap();
        let y = conv2d(&x, &p).unwrap();
        for k in 0..3 {
            assert!(y.plane(0, k).iter().all(|&v| v == p.bias.data()[k]));
        }
    }

    #[test]
    fn ones_kernel_matches_window_sum() {
        let x = Tensor::uniform(Shape::new(1, 1, 5, 5), -1.0, 1.0, &mut Rng::new(3));
        let p = ConvParams::new(
            Tensor::full(Shape::new(1, 1, 3, 3), 1.0),
            Tensor::vector(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += x.at(0, 0, i + a, j + b);
                    }
                }
                assert!((y.at(0, 0, i, j) - s).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn matches_naive_over_strides_and_padding() {
        let mut seed = 10;
        for &(size, stride, pad) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (2, 2, 0), (3, 3, 2)] {
            seed += 1;
            let p = params(3, 2, size, stride, pad, seed);
            let x = Tensor::uniform(Shape::new(2, 2, 9, 8), -1.0, 1.0, &mut Rng::new(seed + 100));
            let diff = conv2d(&x, &p).unwrap().max_abs_diff(&naive(&x, &p)).unwrap();
            assert!(diff < 1e-12, "size {size} stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn shape_errors() {
        let p = params(2, 3, 3, 1, 0, 1);
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 2, 5, 5)), &p).is_err());
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 3, 2, 2)), &p).is_err());
        assert!(ConvParams::new(Tensor::zeros(Shape::new(2, 1, 1, 1)), Tensor::vector(vec![0.0]), 1, 0).is_err());
    }

    #[test]
    fn backward_zero_grad_and_identity() {
        let x = Tensor::uniform(Shape::new(1, 1, 4, 4), -1.0, 1.0, &mut Rng::new(4));
        let p = ConvParams::new(
            Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            Tensor::vector(vec![0.0]),
            1,
            0,
        )
        .unwrap();
        let zero = conv2d_backward(&x, &p, &Tensor::zeros(x.shape())).unwrap();
        assert!(zero.input.data().iter().chain(zero.kernels.data()).all(|&v| v == 0.0));
        let g = Tensor::uniform(x.shape(), -1.0, 1.0, &mut Rng::new(5));
        assert_eq!(conv2d_backward(&x, &p, &g).unwrap().input, g);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, &(size, stride, pad)) in [(3, 1, 1), (3, 2, 0), (2, 2, 1)].iter().enumerate() {
            let seed = seed as u64 * 7 + 20;
            let p = params(2, 2, size, stride, pad, seed);
            let x = Tensor::uniform(Shape::new(2, 2, 5, 5), -1.0, 1.0, &mut Rng::new(seed + 1));
            let os = p.output_shape(x.shape()).unwrap();
            let g = Tensor::uniform(os, -1.0, 1.0, &mut Rng::new(seed + 2));
            let grads = conv2d_backward(&x, &p, &g).unwrap();

            let fd_x = finite_difference_gradient(|t| conv2d(t, &p)?.dot(&g), &x, 1e-4).unwrap();
            assert!(max_relative_error(&grads.input, &fd_x).unwrap() < 1e-4);
            let fd_k = finite_difference_gradient(
                |k| {
                    let q = ConvParams {
                        kernels: k.clone(),
                        ..p.clone()
                    };
                    conv2d(&x, &q)?.dot(&g)
                },
                &p.kernels,
                1e-4,
            )
            .unwrap();
            assert!(max_relative_error(&grads.kernels, &fd_k).unwrap() < 1e-4);
            let fd_b = finite_difference_gradient(
                |b| {
                    let q = ConvParams {
                        bias: b.clone(),
                        ..p.clone()
                    };
                    conv2d(&x, &q)?.dot(&g)
                },
                &p.bias,
                1e-4,
            )
            .unwrap();
            assert!(max_relative_error(&grads.bias, &fd_b).unwrap() < 1e-4);
        }
    }

    /// Direct evaluation of the signed-index convolution
    /// `h_k(x, y) = sum_{s,t,v} V_k(s, t, v) X(x - s, y - t, v)` with
    /// `s in -m..=m`, `t in -n..=n` and zero outside the image.
    fn signed_index_convolution(input: &Tensor, v: &Tensor, bias: &[f64]) -> Tensor {
        let vs = v.shape();
        let (m, nn) = ((vs.h / 2) as isize, (vs.w / 2) as isize);
        let is = input.shape();
        Tensor::from_fn(Shape::new(is.n, vs.n, is.h, is.w), |b, k, x, y| {
            let mut acc = bias[k];
            for depth in 0..vs.c {
                for s in -m..=m {
                    for t in -nn..=nn {
                        let (xi, yi) = (x as isize - s, y as isize - t);
                        if xi < 0 || yi < 0 || xi >= is.h as isize || yi >= is.w as isize {
                            continue;
                        }
                        acc += v.at(k, depth, (s + m) as usize, (t + nn) as usize)
                            * input.at(b, depth, xi as usize, yi as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn flipped_kernel_reproduces_signed_index_convolution() {
        let mut rng = Rng::new(99);
        // Integer-valued data keeps every partial sum exact, so the two
        // summation orders must agree bit for bit.
        let ints = |shape: Shape, rng: &mut Rng| {
            Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.below(9) as f64 - 4.0).collect()).unwrap()
        };
        for _ in 0..5 {
            let v = ints(Shape::new(2, 3, 3, 5), &mut rng);
            let x = ints(Shape::new(1, 3, 6, 7), &mut rng);
            let bias = vec![1.0, -2.0];
            let flipped = Tensor::from_fn(v.shape(), |k, c, a, b| v.at(k, c, 2 - a, 4 - b));
            let p = ConvParams {
                kernels: flipped,
                bias: Tensor::vector(bias.clone()),
                stride: 1,
                padding: 0,
            };
            // Asymmetric kernel: pad rows by 1 and columns by 2 via explicit padding.
            let padded = Tensor::from_fn(Shape::new(1, 3, 8, 11), |n, c, h, w| {
                if (1..7).contains(&h) && (2..9).contains(&w) {
                    x.at(n, c, h - 1, w - 2)
                } else {
                    0.0
                }
            });
            let via_conv = conv2d(&padded, &p).unwrap();
            assert_eq!(via_conv, signed_index_convolution(&x, &v, &bias));
        }
    }
}
