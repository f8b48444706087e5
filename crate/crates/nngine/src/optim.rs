use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        if !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(NnError::InvalidOptimizer(format!("lr must be positive, got {}", c.lr)));
        }
        for (name, b) in [("beta1", c.beta1), ("beta2", c.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(NnError::InvalidOptimizer(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if c.eps <= 0.0 {
            return Err(NnError::InvalidOptimizer(format!("eps must be positive, got {}", c.eps)));
        }
        Ok(Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch {
                context: "adam parameter/gradient count",
                expected: vec![params.len()],
                actual: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            g.expect_same_shape(p, "adam gradient")?;
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(Tensor::zeros_like).collect();
            self.second_moment = grads.iter().map(Tensor::zeros_like).collect();
        } else if self.first_moment.len() != grads.len()
            || self.first_moment.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(NnError::ShapeMismatch {
                context: "adam moments vs gradients",
                expected: self.first_moment.iter().map(Tensor::len).collect(),
                actual: grads.iter().map(Tensor::len).collect(),
            });
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / correction1;
                let vhat = *vv / correction2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor::zeros(vec![3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the first update is lr * g / (|g| + eps).
        let mut opt = Adam::new(AdamConfig::with_lr(0.001)).unwrap();
        let mut p = scalar(1.0);
        opt.step(vec![&mut p], &[scalar(1.0)]).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.999).abs() < 1e-9);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn restored_state_replays_identically() {
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(0.3);
        opt.step(vec![&mut p], &[scalar(0.7)]).unwrap();
        let json = serde_json::to_string(&opt).unwrap();
        let mut restored: Adam<f64> = serde_json::from_str(&json).unwrap();
        let mut q = p.clone();
        for g in [0.2, -0.4] {
            opt.step(vec![&mut p], &[scalar(g)]).unwrap();
            restored.step(vec![&mut q], &[scalar(g)]).unwrap();
        }
        assert_eq!(p, q);
        assert_eq!(opt, restored);
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        assert!(Adam::<f32>::new(AdamConfig::with_lr(0.0)).is_err());
        assert!(Adam::<f32>::new(AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        })
        .is_err());
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let mut p = scalar(1.0);
        let err = opt.step(vec![&mut p], &[Tensor::zeros(vec![2])]);
        assert!(matches!(err, Err(NnError::ShapeMismatch { .. })));
    }
}
