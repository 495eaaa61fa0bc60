use super::Scalar;

/// SGD with classic momentum: `v = m·v + g; p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates each `params[i]` with `grads[i]`. Empty gradient slices are
    /// skipped (non-trainable tensors).
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) {
        if self.velocity.len() != params.len() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let (lr, m) = (T::of(self.lr), T::of(self.momentum));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if g.is_empty() {
                continue;
            }
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = m * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = vec![1.0f64];
        let mut opt = Sgd::new(0.01, 0.0);
        opt.step(&mut [&mut p], &[vec![1.0]]);
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = vec![0.0f64];
        let mut opt = Sgd::new(0.01, 0.9);
        opt.step(&mut [&mut p], &[vec![1.0]]);
        opt.step(&mut [&mut p], &[vec![1.0]]);
        assert!((p[0] + 0.01 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_change() {
        let mut p = vec![0.5f32, -2.0];
        let mut opt = Sgd::new(0.01, 0.9);
        opt.step(&mut [&mut p], &[vec![0.0, 0.0]]);
        assert_eq!(p, vec![0.5, -2.0]);
    }
}
