//! Stochastic gradient descent with heavy-ball momentum.

use crate::tensor::Tensor;

/// `v = momentum * v + g; w -= lr * v`, with one velocity per parameter
/// tensor in visiting order.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `visit` must present the same tensors in the same order on every call.
    pub fn step<F>(&mut self, visit: F)
    where
        F: FnOnce(&mut dyn FnMut(&mut Tensor, &mut Tensor)),
    {
        let (lr, mu) = (self.learning_rate, self.momentum);
        let velocity = &mut self.velocity;
        let mut idx = 0;
        visit(&mut |w, g| {
            if idx == velocity.len() {
                velocity.push(Tensor::zeros(w.shape()));
            }
            let v = &mut velocity[idx];
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn momentum_recurrence() {
        let mut w = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let mut g = Tensor::full(Shape::new(1, 1, 1, 2), 0.5);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(|f| f(&mut w, &mut g));
        assert_eq!(w.data(), &[0.95, 0.95]);
        opt.step(|f| f(&mut w, &mut g));
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((w.data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut w = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-0.0, 1.5, -2.25]).unwrap();
        let before = w.to_record_bytes();
        let mut g = Tensor::full(w.shape(), 3.0);
        let mut opt = Sgd::new(0.0, 0.9);
        for _ in 0..3 {
            opt.step(|f| f(&mut w, &mut g));
        }
        assert_eq!(w.to_record_bytes(), before);
    }
}
