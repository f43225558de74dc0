use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Fully connected weights: `weight` is (out, in, 1, 1), `bias` is (1, out, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 || bias.len() != ws.n {
            return Err(Error::shape(format!(
                "linear weight {ws} and bias of length {} are inconsistent",
                bias.len()
            )));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn he_init(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        LinearParams {
            weight: Tensor::normal(
                Shape::new(out_features, in_features, 1, 1),
                (2.0 / in_features as f64).sqrt(),
                rng,
            ),
            bias: Tensor::vector(vec![0.0; out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }
}

fn features(input: &Tensor, p: &LinearParams) -> Result<usize> {
    let s = input.shape();
    let f = s.c * s.plane();
    if f != p.in_features() {
        return Err(Error::shape(format!(
            "linear expects {} features, input {s} flattens to {f}",
            p.in_features()
        )));
    }
    Ok(f)
}

/// `out[n] = W x[n] + b`, with each sample flattened over (C, H, W).
pub fn linear(input: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let f = features(input, p)?;
    let n = input.shape().n;
    let o = p.out_features();
    let w = p.weight.data();
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        let x = &input.data()[i * f..(i + 1) * f];
        for j in 0..o {
            let row = &w[j * f..(j + 1) * f];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + p.bias.data()[j]);
        }
    }
    Tensor::from_vec(Shape::new(n, o, 1, 1), out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let f = features(input, p)?;
    let n = input.shape().n;
    let o = p.out_features();
    grad_out.expect_shape(Shape::new(n, o, 1, 1), "linear_backward grad_out")?;
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = Tensor::zeros(p.bias.shape());
    let w = p.weight.data();
    let g = grad_out.data();
    for i in 0..n {
        let x = &input.data()[i * f..(i + 1) * f];
        let gx = &mut gin.data_mut()[i * f..(i + 1) * f];
        for j in 0..o {
            let gj = g[i * o + j];
            gb.data_mut()[j] += gj;
            for (gxv, wv) in gx.iter_mut().zip(&w[j * f..(j + 1) * f]) {
                *gxv += gj * wv;
            }
            for (gwv, xv) in gw.data_mut()[j * f..(j + 1) * f].iter_mut().zip(x) {
                *gwv += gj * xv;
            }
        }
    }
    Ok(LinearGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}
