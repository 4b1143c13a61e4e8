use super::{DiffError, Tensor};

/// Cosine-annealed learning rate at optimizer step `n` (0-based).
pub fn cosine_lr(base: f64, n: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let frac = (n.min(horizon) as f64) / horizon as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction and a cosine-annealed step size.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps over which the learning rate decays to zero.
    pub horizon: usize,
    pub step_count: usize,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, horizon: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            horizon,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Learning rate the next call to [`AdamState::step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.lr, self.step_count, self.horizon)
    }

    /// Apply one update in place and return the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<f64, DiffError> {
        if params.len() != grads.len() {
            return Err(DiffError::ElementCount {
                left: params.len(),
                right: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        for (i, p) in params.iter().enumerate() {
            if self.first_moment.get(i).map(Tensor::shape) != Some(p.shape()) {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: self
                        .first_moment
                        .get(i)
                        .map(|m| m.shape().to_vec())
                        .unwrap_or_default(),
                });
            }
        }

        let lr = self.current_lr();
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut state = AdamState::new(1e-4, 1000);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.5);
        state.step(&mut [&mut p], &[&g]).unwrap();
        let delta = p.data()[0] as f64 - 1.0;
        // closed form: -lr * g / (|g| + eps)
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-7, "delta {delta}");
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut state = AdamState::new(1e-2, 10);
        let mut p = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 4.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[2, 2]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn lr_reaches_zero_at_horizon() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut state = AdamState::new(1e-3, 10);
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(state.step(&mut [&mut p], &[&g]).is_err());
    }
}
