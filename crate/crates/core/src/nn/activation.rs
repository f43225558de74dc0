use crate::error::Result;
use crate::tensor::{Shape, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the channel axis of an (N, C, 1, 1) logit tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let per = s.c * s.plane();
    let mut data = Vec::with_capacity(logits.len());
    for n in 0..s.n {
        data.extend(softmax_row(&logits.data()[n * per..(n + 1) * per]));
    }
    Tensor::from_vec(Shape::new(s.n, per, 1, 1), data).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(vec![0.0, 0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let g = Tensor::vector(vec![1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let mut x = Tensor::uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
            while x.data().iter().any(|v| v.abs() < 1e-3) {
                x = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
            }
            let g = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
            let fd = finite_difference_gradient(|t| relu(t).dot(&g), &x, 1e-4).unwrap();
            assert!(max_relative_error(&relu_backward(&x, &g).unwrap(), &fd).unwrap() < 1e-4);
        }
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax_row(&[2.0; 4]);
        assert!(eq.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax_row(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let base = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = base.iter().map(|v| v + 1000.0).collect();
        for (a, b) in softmax_row(&base).iter().zip(softmax_row(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let logits = Tensor::uniform(Shape::new(10, 5, 1, 1), -50.0, 50.0, &mut rng);
        let p = softmax(&logits);
        for n in 0..10 {
            let row = &p.data()[n * 5..(n + 1) * 5];
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
