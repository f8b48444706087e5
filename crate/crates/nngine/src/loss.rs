//! Losses returning the scalar value and its gradient with respect to `pred`.

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    pred.expect_same_shape(target, "loss target")?;
    if pred.is_empty() {
        return Err(NnError::ShapeMismatch {
            context: "loss over empty tensor",
            expected: vec![1],
            actual: vec![0],
        });
    }
    Ok(())
}

/// Mean squared error over all elements; gradient `2 (pred - target) / n`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let scale = T::from_f64_lossy(2.0 / n);
    let mut grad = Tensor::zeros_like(pred);
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.to_f64_lossy().powi(2);
        *g = scale * d;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Mean absolute error; subgradient `sign(pred - target) / n`, zero at equality.
pub fn l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let step = T::from_f64_lossy(1.0 / n);
    let mut grad = Tensor::zeros_like(pred);
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.to_f64_lossy().abs();
        *g = if d > T::zero() {
            step
        } else if d < T::zero() {
            -step
        } else {
            T::zero()
        };
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok((loss, grad))
}
