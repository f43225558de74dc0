use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel batch-norm state. All four vectors are (1, C, 1, 1).
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`,
/// with the biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::vector(vec![1.0; channels]),
            beta: Tensor::vector(vec![0.0; channels]),
            running_mean: Tensor::vector(vec![0.0; channels]),
            running_var: Tensor::vector(vec![1.0; channels]),
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("batch-norm vectors disagree on channel count"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("batch-norm epsilon must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config("batch-norm momentum must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    normalized: Tensor,
    inv_std: Vec<f64>,
}

pub fn batch_norm(input: &Tensor, p: &mut BatchNormParams, mode: Mode) -> Result<Tensor> {
    batch_norm_cached(input, p, mode).map(|(out, _)| out)
}

pub fn batch_norm_cached(input: &Tensor, p: &mut BatchNormParams, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
    let s = input.shape();
    if s.c != p.channels() {
        return Err(Error::shape(format!(
            "batch_norm has {} channels, input has {}",
            p.channels(),
            s.c
        )));
    }
    let plane = s.plane();
    let count = s.n * plane;
    let (mean, var) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::domain("batch statistics of an empty batch"));
            }
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let mut sum = 0.0;
                for n in 0..s.n {
                    sum += input.plane(n, c).iter().sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += input.plane(n, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[c] = mu;
                var[c] = sq / count as f64;
            }
            let m = p.momentum;
            for c in 0..s.c {
                let rm = &mut p.running_mean.data_mut()[c];
                *rm = m * *rm + (1.0 - m) * mean[c];
                let rv = &mut p.running_var.data_mut()[c];
                *rv = m * *rv + (1.0 - m) * var[c];
            }
            (mean, var)
        }
        Mode::Infer => (p.running_mean.data().to_vec(), p.running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    {
        let x = input.data();
        let xn = normalized.data_mut();
        let o = out.data_mut();
        let (g, b) = (p.gamma.data(), p.beta.data());
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    let v = (x[i] - mean[c]) * inv_std[c];
                    xn[i] = v;
                    o[i] = g[c] * v + b[c];
                }
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_backward(cache: &BatchNormCache, gamma: &Tensor, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let s = cache.normalized.shape();
    grad_out.expect_shape(s, "batch_norm_backward grad_out")?;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let xn = cache.normalized.data();
    let g = grad_out.data();
    let mut sum_g = vec![0.0; s.c];
    let mut sum_gx = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xn[i];
            }
        }
    }
    let mut gin = Tensor::zeros(s);
    let gi = gin.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let scale = gamma.data()[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Train => {
                    let mg = sum_g[c] / count;
                    let mgx = sum_gx[c] / count;
                    for i in base..base + plane {
                        gi[i] = scale * (g[i] - mg - xn[i] * mgx);
                    }
                }
                Mode::Infer => {
                    for i in base..base + plane {
                        gi[i] = scale * g[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: gin,
        gamma: Tensor::vector(sum_gx),
        beta: Tensor::vector(sum_g),
    })
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let s: Shape = t.shape();
    let count = (s.n * s.plane()) as f64;
    (0..s.c)
        .map(|c| {
            let vals: Vec<f64> = (0..s.n).flat_map(|n| t.plane(n, c).iter().copied()).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            (mean, var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(Shape::new(4, 2, 3, 3), 7.5);
        let mut p = BatchNormParams::new(2);
        let y = batch_norm(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut Rng::new(1));
        let mut p = BatchNormParams::new(3);
        p.gamma = Tensor::vector(vec![0.0; 3]);
        p.beta = Tensor::vector(vec![0.25, -1.0, 3.0]);
        for mode in [Mode::Train, Mode::Infer] {
            let y = batch_norm(&x, &mut p, mode).unwrap();
            for c in 0..3 {
                for n in 0..2 {
                    assert!(y.plane(n, c).iter().all(|&v| v == p.beta.data()[c]));
                }
            }
        }
    }

    #[test]
    fn train_output_has_unit_moments() {
        let x = Tensor::uniform(Shape::new(3, 4, 5, 5), -2.0, 5.0, &mut Rng::new(2));
        let mut p = BatchNormParams::new(4);
        let y = batch_norm(&x, &mut p, Mode::Train).unwrap();
        for (mean, var) in channel_moments(&y) {
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::full(Shape::new(2, 1, 2, 2), 3.0);
        let mut p = BatchNormParams::new(1);
        batch_norm(&x, &mut p, Mode::Train).unwrap();
        assert!((p.running_mean.data()[0] - 0.3).abs() < 1e-15);
        assert!((p.running_var.data()[0] - 0.9).abs() < 1e-15);
        let y = batch_norm(&x, &mut p, Mode::Infer).unwrap();
        let expect = (3.0 - 0.3) / (0.9f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        let mut p = BatchNormParams::new(2);
        assert!(batch_norm(&Tensor::zeros(Shape::new(1, 3, 2, 2)), &mut p, Mode::Train).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, mode) in [(3, Mode::Train), (4, Mode::Infer), (5, Mode::Train)] {
            let mut rng = Rng::new(seed);
            let x = Tensor::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
            let g = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
            let mut p = BatchNormParams::new(2);
            p.gamma = Tensor::uniform(Shape::new(1, 2, 1, 1), 0.5, 1.5, &mut rng);
            p.beta = Tensor::uniform(Shape::new(1, 2, 1, 1), -1.0, 1.0, &mut rng);
            p.running_mean = Tensor::uniform(Shape::new(1, 2, 1, 1), -0.5, 0.5, &mut rng);
            p.running_var = Tensor::uniform(Shape::new(1, 2, 1, 1), 0.5, 1.5, &mut rng);
            let (_, cache) = batch_norm_cached(&x, &mut p.clone(), mode).unwrap();
            let grads = batch_norm_backward(&cache, &p.gamma, &g).unwrap();

            let eval = |x: &Tensor, q: &BatchNormParams| batch_norm(x, &mut q.clone(), mode)?.dot(&g);
            let fd_x = finite_difference_gradient(|t| eval(t, &p), &x, 1e-4).unwrap();
            assert!(max_relative_error(&grads.input, &fd_x).unwrap() < 1e-4);
            let fd_g = finite_difference_gradient(
                |t| {
                    eval(
                        &x,
                        &BatchNormParams {
                            gamma: t.clone(),
                            ..p.clone()
                        },
                    )
                },
                &p.gamma,
                1e-4,
            )
            .unwrap();
            assert!(max_relative_error(&grads.gamma, &fd_g).unwrap() < 1e-4);
            let fd_b = finite_difference_gradient(
                |t| {
                    eval(
                        &x,
                        &BatchNormParams {
                            beta: t.clone(),
                            ..p.clone()
                        },
                    )
                },
                &p.beta,
                1e-4,
            )
            .unwrap();
            assert!(max_relative_error(&grads.beta, &fd_b).unwrap() < 1e-4);
        }
    }
}
