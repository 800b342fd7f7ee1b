//! First-order optimizers over lists of parameter tensors.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Optimizer state for a fixed, ordered list of parameters.
///
/// Adam moments are allocated on the first step and keyed by position, so
/// callers must pass parameters in the same order every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self, TensorError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::LearningRate(learning_rate));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self, TensorError> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self, TensorError> {
        Self::new(OptimizerKind::ADAM, learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step<'a, P>(&mut self, params: P, grads: &[Tensor]) -> Result<(), TensorError>
    where
        P: IntoIterator<Item = &'a mut Tensor>,
    {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(TensorError::ParamCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "opt_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != grads.len()
                    || self
                        .first
                        .iter()
                        .zip(grads)
                        .any(|(m, g)| m.shape() != g.shape())
                {
                    return Err(TensorError::ParamCount {
                        params: self.first.len(),
                        grads: grads.len(),
                    });
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((x, &d), m), v) in iter {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_by_hand() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(p.iter_mut(), &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let init = Tensor::vector(vec![0.5, -1.25, 3.0]);
        for mut opt in [Optimizer::sgd(0.1).unwrap(), Optimizer::adam(1e-3).unwrap()] {
            let mut p = vec![init.clone()];
            opt.step(p.iter_mut(), &[Tensor::zeros(&[3])]).unwrap();
            assert_eq!(p[0], init);
        }
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        // At t = 1: m̂ = g, v̂ = g², so the update is lr · g / (|g| + eps).
        for scale in [1e-4, 1.0, 1e4] {
            let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
            let mut opt = Optimizer::adam(1e-3).unwrap();
            opt.step(p.iter_mut(), &[Tensor::vector(vec![scale, -scale])])
                .unwrap();
            let expected = 1e-3 * scale / (scale + 1e-8);
            assert!((p[0].data()[0] + expected).abs() < 1e-15);
            assert!((p[0].data()[1] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Optimizer::sgd(0.1).unwrap();
        assert!(opt.step(p.iter_mut(), &[Tensor::zeros(&[3])]).is_err());
        assert!(Optimizer::adam(0.0).is_err());
    }
}
