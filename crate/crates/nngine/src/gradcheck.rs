//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64`. Batch-norm layers are evaluated with batch statistics and
//! the running statistics are left untouched, so every probe sees the same
//! function.

use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

/// Entries smaller than this fraction of their tensor's largest gradient
/// are compared at that scale instead of their own, so cancellation dust in
/// near-zero entries is not mistaken for a wrong derivative.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
        }
    }

    fn merge_tensor(&mut self, analytic: &[f64], numeric: &[f64]) {
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (RELATIVE_FLOOR * scale).max(1e-12);
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.max_rel_error = self.max_rel_error.max(relative_error(a, n, floor));
            self.checked += 1;
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every parameter and input gradient of `net` under `loss`, where
/// `loss(output)` returns the scalar loss and its gradient.
pub fn check_network<L>(net: &mut Network<f64>, input: &Tensor<f64>, loss: L, step: f64) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (out, cache) = net.forward_frozen_stats(input.clone())?;
    let (_, dout) = loss(&out)?;
    let (param_grads, input_grad) = net.backward(&cache, dout)?;
    drop(cache);

    let eval = |net: &Network<f64>, x: Tensor<f64>| -> Result<f64> {
        let (y, _) = net.forward_frozen_stats(x)?;
        Ok(loss(&y)?.0)
    };

    let mut report = GradCheckReport::empty();
    let counts: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    for (p, n) in counts.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let original = net.params_mut()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = original + step;
            let plus = eval(net, input.clone())?;
            net.params_mut()[p].data_mut()[i] = original - step;
            let minus = eval(net, input.clone())?;
            net.params_mut()[p].data_mut()[i] = original;
            numeric.push((plus - minus) / (2.0 * step));
        }
        report.merge_tensor(param_grads[p].data(), &numeric);
    }
    let mut numeric = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let mut x = input.clone();
        x.data_mut()[i] += step;
        let plus = eval(net, x)?;
        let mut x = input.clone();
        x.data_mut()[i] -= step;
        let minus = eval(net, x)?;
        numeric.push((plus - minus) / (2.0 * step));
    }
    report.merge_tensor(input_grad.data(), &numeric);
    Ok(report)
}

/// Checks the gradient a loss reports against finite differences of its value.
pub fn check_loss<L>(pred: &Tensor<f64>, target: &Tensor<f64>, loss: L, step: f64) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>, &Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (_, grad) = loss(pred, target)?;
    let mut numeric = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let mut p = pred.clone();
        p.data_mut()[i] += step;
        let plus = loss(&p, target)?.0;
        let mut p = pred.clone();
        p.data_mut()[i] -= step;
        let minus = loss(&p, target)?.0;
        numeric.push((plus - minus) / (2.0 * step));
    }
    let mut report = GradCheckReport::empty();
    report.merge_tensor(grad.data(), &numeric);
    Ok(report)
}

/// Layer kinds covered by [`sample_case`].
pub const LAYER_KINDS: &[&str] = &[
    "linear",
    "batchnorm1d",
    "relu",
    "sigmoid",
    "prelu",
    "conv1d",
    "conv1d_transpose",
    "layernorm",
    "residual",
];

/// A randomly shaped single-layer network of the given kind plus an input
/// batch. Inputs to kinked layers (ReLU, PReLU) keep away from zero so the
/// finite-difference probe never straddles the kink.
pub fn sample_case<R: rand::Rng>(kind: &str, rng: &mut R) -> Result<(Network<f64>, Tensor<f64>)> {
    use crate::layer::LayerSpec;

    let batch = rng.random_range(2..=4);
    let ch_in = rng.random_range(1..=3);
    let ch_out = rng.random_range(1..=3);
    let len = rng.random_range(6..=12);
    let (spec, shape) = match kind {
        "linear" => (
            LayerSpec::Linear {
                input: ch_in + 1,
                output: ch_out + 1,
            },
            vec![batch, ch_in + 1],
        ),
        // A batch of two normalizes to ±1 regardless of input (same for two
        // channels under layer norm), so both start at four.
        "batchnorm1d" => (LayerSpec::BatchNorm1d { features: ch_in + 1 }, vec![batch + 2, ch_in + 1]),
        "relu" => (LayerSpec::Relu, vec![batch, ch_in, len]),
        "sigmoid" => (LayerSpec::Sigmoid, vec![batch, ch_in, len]),
        "prelu" => (LayerSpec::Prelu { channels: ch_in }, vec![batch, ch_in, len]),
        "conv1d" => {
            let kernel = rng.random_range(1..=3);
            let dilation = rng.random_range(1..=2);
            (
                LayerSpec::Conv1d {
                    input: ch_in,
                    output: ch_out,
                    kernel,
                    stride: rng.random_range(1..=2),
                    dilation,
                    padding: rng.random_range(0..=dilation * (kernel - 1)),
                },
                vec![batch, ch_in, len],
            )
        }
        "conv1d_transpose" => {
            let kernel = rng.random_range(2..=4);
            (
                LayerSpec::Conv1dTranspose {
                    input: ch_in,
                    output: ch_out,
                    kernel,
                    stride: rng.random_range(1..=kernel),
                    dilation: 1,
                    padding: rng.random_range(0..=1),
                },
                vec![batch, ch_in, len],
            )
        }
        "layernorm" => (LayerSpec::LayerNorm { channels: ch_in + 3 }, vec![batch, ch_in + 3, len]),
        "residual" => (
            LayerSpec::Residual {
                body: vec![
                    LayerSpec::Conv1d {
                        input: ch_in + 2,
                        output: ch_in + 2,
                        kernel: 3,
                        stride: 1,
                        dilation: 2,
                        padding: 2,
                    },
                    LayerSpec::Sigmoid,
                ],
            },
            vec![batch, ch_in + 2, len],
        ),
        other => return Err(crate::error::NnError::InvalidSpec(format!("unknown layer kind {other}"))),
    };
    let mut net = Network::new(std::slice::from_ref(&spec), rng)?;
    // Move gains, slopes and biases off their initial values so every term
    // of the backward pass is exercised.
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let kinked = matches!(kind, "relu" | "prelu");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if kinked {
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            } else {
                rng.random_range(-1.5..1.5)
            }
        })
        .collect();
    Ok((net, Tensor::new(shape, data)?))
}

/// Runs `trials` randomized checks of one layer kind under an MSE loss
/// against a random target; returns the worst report.
pub fn check_layer_kind<R: rand::Rng>(kind: &str, trials: usize, step: f64, rng: &mut R) -> Result<GradCheckReport> {
    let mut worst = GradCheckReport::empty();
    for _ in 0..trials {
        let (mut net, input) = sample_case(kind, rng)?;
        let out = net.forward_frozen_stats(input.clone())?.0;
        let target = Tensor::new(
            out.shape().to_vec(),
            (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let report = check_network(&mut net, &input, |y| crate::loss::mse(y, &target), step)?;
        worst.max_rel_error = worst.max_rel_error.max(report.max_rel_error);
        worst.checked += report.checked;
    }
    Ok(worst)
}
