use crate::error::{Error, Result};
use crate::nn::conv::out_extent;
use crate::tensor::{Shape, Tensor};

/// Window geometry shared by the pooling operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub window: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl Pool2d {
    pub fn new(window: (usize, usize), stride: usize) -> Self {
        Pool2d {
            window,
            stride,
            padding: 0,
        }
    }

    pub fn padded(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.window.0 > input.h + 2 * self.padding || self.window.1 > input.w + 2 * self.padding {
            return Err(Error::shape(format!(
                "pool window {:?} larger than input {}x{}",
                self.window, input.h, input.w
            )));
        }
        if self.padding > 0 && (self.padding >= self.window.0 || self.padding >= self.window.1) {
            return Err(Error::shape("pool padding must be smaller than the window"));
        }
        Ok(Shape::new(
            input.n,
            input.c,
            out_extent(input.h, self.window.0, self.stride, self.padding)?,
            out_extent(input.w, self.window.1, self.stride, self.padding)?,
        ))
    }
}

/// Window maximum; padded cells never win. The returned indices are flat
/// offsets into the input, with ties broken by the lowest offset.
pub fn max_pool2d(input: &Tensor, pool: Pool2d) -> Result<(Tensor, Vec<usize>)> {
    let is = input.shape();
    let os = pool.output_shape(is)?;
    let (wh, ww) = pool.window;
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let x = input.data();
    for n in 0..is.n {
        for c in 0..is.c {
            let base = (n * is.c + c) * is.plane();
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for a in 0..wh {
                        let ih = (oh * pool.stride + a) as isize - pool.padding as isize;
                        if ih < 0 || ih as usize >= is.h {
                            continue;
                        }
                        for b in 0..ww {
                            let iw = (ow * pool.stride + b) as isize - pool.padding as isize;
                            if iw < 0 || iw as usize >= is.w {
                                continue;
                            }
                            let idx = base + ih as usize * is.w + iw as usize;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    if best_idx == usize::MAX {
                        return Err(Error::shape("pool window covers only padding"));
                    }
                    out.set(n, c, oh, ow, best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward(input_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("argmax and grad_out lengths differ"));
    }
    let mut gin = Tensor::zeros(input_shape);
    let gi = gin.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gi[idx] += g;
    }
    Ok(gin)
}

/// Window mean without padding.
pub fn avg_pool2d(input: &Tensor, window: (usize, usize), stride: usize) -> Result<Tensor> {
    let is = input.shape();
    let os = Pool2d::new(window, stride).output_shape(is)?;
    let inv = 1.0 / (window.0 * window.1) as f64;
    let mut out = Tensor::zeros(os);
    for n in 0..is.n {
        for c in 0..is.c {
            let plane = input.plane(n, c);
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut s = 0.0;
                    for a in 0..window.0 {
                        let row = (oh * stride + a) * is.w + ow * stride;
                        s += plane[row..row + window.1].iter().sum::<f64>();
                    }
                    out.set(n, c, oh, ow, s * inv);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward(
    input_shape: Shape,
    window: (usize, usize),
    stride: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let os = Pool2d::new(window, stride).output_shape(input_shape)?;
    grad_out.expect_shape(os, "avg_pool2d_backward grad_out")?;
    let inv = 1.0 / (window.0 * window.1) as f64;
    let mut gin = Tensor::zeros(input_shape);
    let is = input_shape;
    let gi = gin.data_mut();
    for n in 0..is.n {
        for c in 0..is.c {
            let base = (n * is.c + c) * is.plane();
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let g = grad_out.at(n, c, oh, ow) * inv;
                    for a in 0..window.0 {
                        let row = base + (oh * stride + a) * is.w + ow * stride;
                        for v in &mut gi[row..row + window.1] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::domain("global average pool over an empty plane"));
    }
    let inv = 1.0 / s.plane() as f64;
    let data = (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| input.plane(n, c).iter().sum::<f64>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let s = input_shape;
    grad_out.expect_shape(Shape::new(s.n, s.c, 1, 1), "global_avg_pool_backward grad_out")?;
    let inv = 1.0 / s.plane() as f64;
    Ok(Tensor::from_fn(s, |n, c, _, _| grad_out.at(n, c, 0, 0) * inv))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Tensor {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * factor, s.w * factor), |n, c, h, w| {
        input.at(n, c, h / factor, w / factor)
    })
}

pub fn upsample_nearest_backward(input_shape: Shape, factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let s = input_shape;
    grad_out.expect_shape(
        Shape::new(s.n, s.c, s.h * factor, s.w * factor),
        "upsample_nearest_backward grad_out",
    )?;
    let mut gin = Tensor::zeros(s);
    let go = grad_out.shape();
    for n in 0..go.n {
        for c in 0..go.c {
            for h in 0..go.h {
                for w in 0..go.w {
                    let i = gin.offset(n, c, h / factor, w / factor);
                    gin.data_mut()[i] += grad_out.at(n, c, h, w);
                }
            }
        }
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    fn two_by_two() -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn scan_max(x: &Tensor, pool: Pool2d) -> Tensor {
        let os = pool.output_shape(x.shape()).unwrap();
        Tensor::from_fn(os, |n, c, oh, ow| {
            let mut best = f64::NEG_INFINITY;
            for a in 0..pool.window.0 {
                for b in 0..pool.window.1 {
                    let (h, w) = (
                        (oh * pool.stride + a) as isize - pool.padding as isize,
                        (ow * pool.stride + b) as isize - pool.padding as isize,
                    );
                    if h >= 0 && w >= 0 && (h as usize) < x.shape().h && (w as usize) < x.shape().w {
                        best = best.max(x.at(n, c, h as usize, w as usize));
                    }
                }
            }
            best
        })
    }

    #[test]
    fn max_pool_examples() {
        let (y, _) = max_pool2d(&two_by_two(), Pool2d::new((2, 2), 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let c = Tensor::full(Shape::new(1, 2, 6, 6), 3.0);
        let (y, _) = max_pool2d(&c, Pool2d::new((3, 3), 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let x = Tensor::uniform(Shape::new(1, 1, 6, 6), -1.0, 1.0, &mut Rng::new(1));
        for pool in [Pool2d::new((3, 3), 2), Pool2d::new((3, 3), 2).padded(1)] {
            let (y, _) = max_pool2d(&x, pool).unwrap();
            assert_eq!(y, scan_max(&x, pool));
        }
        assert!(max_pool2d(&two_by_two(), Pool2d::new((3, 3), 1)).is_err());
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let x = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        let (_, a1) = max_pool2d(&x, Pool2d::new((2, 2), 2)).unwrap();
        let (_, a2) = max_pool2d(&x, Pool2d::new((2, 2), 2)).unwrap();
        assert_eq!(a1, vec![0, 2, 8, 10]);
        assert_eq!(a1, a2);
    }

    #[test]
    fn max_pool_stem_geometry() {
        // 112 -> 56 with a 3x3 window, stride 2, pad 1.
        let s = Pool2d::new((3, 3), 2)
            .padded(1)
            .output_shape(Shape::new(1, 1, 112, 112))
            .unwrap();
        assert_eq!((s.h, s.w), (56, 56));
    }

    #[test]
    fn max_pool_gradcheck() {
        let mut rng = Rng::new(2);
        for pool in [Pool2d::new((2, 2), 2), Pool2d::new((3, 3), 2).padded(1)] {
            let x = Tensor::uniform(Shape::new(2, 2, 6, 6), -1.0, 1.0, &mut rng);
            let (y, arg) = max_pool2d(&x, pool).unwrap();
            let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
            let analytic = max_pool2d_backward(x.shape(), &arg, &g).unwrap();
            let fd = finite_difference_gradient(|t| max_pool2d(t, pool)?.0.dot(&g), &x, 1e-6).unwrap();
            assert!(max_relative_error(&analytic, &fd).unwrap() < 1e-4);
        }
    }

    #[test]
    fn avg_pool_examples() {
        assert_eq!(avg_pool2d(&two_by_two(), (2, 2), 2).unwrap().data(), &[2.5]);
        let c = Tensor::full(Shape::new(2, 3, 4, 4), -1.5);
        assert!(avg_pool2d(&c, (2, 2), 2).unwrap().data().iter().all(|&v| v == -1.5));
        let x = Tensor::uniform(Shape::new(1, 2, 7, 6), -1.0, 1.0, &mut Rng::new(3));
        let y = avg_pool2d(&x, (2, 3), 2).unwrap();
        let oracle = Tensor::from_fn(y.shape(), |n, c, oh, ow| {
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..3 {
                    s += x.at(n, c, oh * 2 + a, ow * 2 + b);
                }
            }
            s / 6.0
        });
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-15);
    }

    #[test]
    fn avg_pool_gradcheck() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(Shape::new(2, 2, 5, 5), -1.0, 1.0, &mut rng);
        let y = avg_pool2d(&x, (2, 2), 2).unwrap();
        let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let analytic = avg_pool2d_backward(x.shape(), (2, 2), 2, &g).unwrap();
        let fd = finite_difference_gradient(|t| avg_pool2d(t, (2, 2), 2)?.dot(&g), &x, 1e-4).unwrap();
        assert!(max_relative_error(&analytic, &fd).unwrap() < 1e-4);
    }

    #[test]
    fn global_pool_examples() {
        assert_eq!(global_avg_pool(&two_by_two()).unwrap().data(), &[2.5]);
        let c = Tensor::full(Shape::new(1, 3, 5, 5), 0.7);
        assert!(global_avg_pool(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        let x = Tensor::uniform(Shape::new(2, 3, 7, 7), -1.0, 1.0, &mut Rng::new(5));
        let g = global_avg_pool(&x).unwrap();
        let a = avg_pool2d(&x, (7, 7), 1).unwrap();
        assert!(g.max_abs_diff(&a).unwrap() < 1e-15);
        assert!(global_avg_pool(&Tensor::zeros(Shape::new(1, 1, 0, 3))).is_err());
    }

    #[test]
    fn global_pool_gradcheck() {
        let mut rng = Rng::new(6);
        let x = Tensor::uniform(Shape::new(2, 3, 3, 4), -1.0, 1.0, &mut rng);
        let g = Tensor::uniform(Shape::new(2, 3, 1, 1), -1.0, 1.0, &mut rng);
        let analytic = global_avg_pool_backward(x.shape(), &g).unwrap();
        let fd = finite_difference_gradient(|t| global_avg_pool(t)?.dot(&g), &x, 1e-4).unwrap();
        assert!(max_relative_error(&analytic, &fd).unwrap() < 1e-4);
    }

    #[test]
    fn upsample_gradcheck() {
        let mut rng = Rng::new(7);
        let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let g = Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
        let analytic = upsample_nearest_backward(x.shape(), 2, &g).unwrap();
        let fd = finite_difference_gradient(|t| upsample_nearest(t, 2).dot(&g), &x, 1e-4).unwrap();
        assert!(max_relative_error(&analytic, &fd).unwrap() < 1e-4);
    }
}
