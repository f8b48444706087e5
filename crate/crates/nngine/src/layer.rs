//! Layer kinds with exact forward and backward passes.
//!
//! Tensor layouts: dense layers and batch norm take `[batch, features]`;
//! convolutions, layer norm and (optionally) PReLU take `[batch, channels, time]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const LAYERNORM_EPS: f64 = 1e-8;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Serializable architecture description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    #[serde(rename = "batchnorm1d")]
    BatchNorm1d {
        features: usize,
    },
    Relu,
    Sigmoid,
    Prelu {
        channels: usize,
    },
    Conv1d {
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Conv1dTranspose {
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    /// Normalizes each time step across channels, with per-channel gain and bias.
    #[serde(rename = "layernorm")]
    LayerNorm {
        channels: usize,
    },
    /// `x + body(x)`.
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::BatchNorm1d { .. } => "batchnorm1d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Prelu { .. } => "prelu",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv1dTranspose { .. } => "conv1d_transpose",
            LayerSpec::LayerNorm { .. } => "layernorm",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::InvalidSpec(msg));
        match self {
            LayerSpec::Linear { input, output } if *input == 0 || *output == 0 => {
                bad(format!("linear dims must be positive ({input} -> {output})"))
            }
            LayerSpec::BatchNorm1d { features: 0 } => bad("batchnorm1d with 0 features".into()),
            LayerSpec::Prelu { channels: 0 } => bad("prelu with 0 channels".into()),
            LayerSpec::LayerNorm { channels: 0 } => bad("layernorm with 0 channels".into()),
            LayerSpec::Conv1d {
                input,
                output,
                kernel,
                stride,
                dilation,
                ..
            }
            | LayerSpec::Conv1dTranspose {
                input,
                output,
                kernel,
                stride,
                dilation,
                ..
            } if [*input, *output, *kernel, *stride, *dilation].contains(&0) => {
                bad(format!("{} dims must be positive", self.kind_name()))
            }
            LayerSpec::Residual { body } => {
                if body.is_empty() {
                    return bad("residual with empty body".into());
                }
                body.iter().try_for_each(LayerSpec::validate)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output length of the forward convolution over an input of `len` samples.
    pub fn conv_out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output length of the transposed convolution over `len` frames.
    pub fn transposed_out_len(&self, len: usize) -> Option<usize> {
        let full = (len - 1) * self.stride + self.dilation * (self.kernel - 1) + 1;
        (full > 2 * self.padding).then(|| full - 2 * self.padding)
    }
}

/// `cols[(c*K + k) * out_len + t] = x[c, t*stride + k*dilation - padding]`, zero outside.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: ConvGeom, in_len: usize, out_len: usize, cols: &mut [T]) {
    for c in 0..g.channels {
        let xs = &x[c * in_len..(c + 1) * in_len];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * out_len..(c * g.kernel + k + 1) * out_len];
            let offset = (k * g.dilation) as isize - g.padding as isize;
            if g.stride == 1 {
                for (t, v) in row.iter_mut().enumerate() {
                    let pos = t as isize + offset;
                    *v = if pos >= 0 && (pos as usize) < in_len {
                        xs[pos as usize]
                    } else {
                        T::zero()
                    };
                }
            } else {
                for (t, v) in row.iter_mut().enumerate() {
                    let pos = (t * g.stride) as isize + offset;
                    *v = if pos >= 0 && (pos as usize) < in_len {
                        xs[pos as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back onto `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, in_len: usize, out_len: usize, x: &mut [T]) {
    for c in 0..g.channels {
        let xs = &mut x[c * in_len..(c + 1) * in_len];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * out_len..(c * g.kernel + k + 1) * out_len];
            let offset = (k * g.dilation) as isize - g.padding as isize;
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride) as isize + offset;
                if pos >= 0 && (pos as usize) < in_len {
                    xs[pos as usize] += v;
                }
            }
        }
    }
}

/// A layer together with its parameters and buffers.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Linear {
        /// `[output, input]`
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    BatchNorm1d {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Relu,
    Sigmoid,
    Prelu {
        alpha: Tensor<T>,
    },
    Conv1d {
        spec: LayerSpec,
        /// `[output, input * kernel]`
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Conv1dTranspose {
        spec: LayerSpec,
        /// `[input, output * kernel]`
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    LayerNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
    },
    Residual {
        body: Vec<Layer<T>>,
    },
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var_unbiased: Vec<T>,
    },
    /// Eval-mode batch norm is affine; only the gain matters for backward.
    Affine,
    Residual(Vec<LayerCache<T>>),
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

fn conv_geom(spec: &LayerSpec) -> (usize, usize, ConvGeom) {
    match *spec {
        LayerSpec::Conv1d {
            input,
            output,
            kernel,
            stride,
            dilation,
            padding,
        } => (
            input,
            output,
            ConvGeom {
                channels: input,
                kernel,
                stride,
                dilation,
                padding,
            },
        ),
        LayerSpec::Conv1dTranspose {
            input,
            output,
            kernel,
            stride,
            dilation,
            padding,
        } => (
            input,
            output,
            ConvGeom {
                channels: output,
                kernel,
                stride,
                dilation,
                padding,
            },
        ),
        _ => unreachable!("conv_geom called on a non-convolution spec"),
    }
}

impl<T: Scalar> Layer<T> {
    /// Fresh layer: weights uniform in ±sqrt(1/fan_in), zero biases, unit norm gains.
    pub fn init<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            LayerSpec::Linear { input, output } => Layer::Linear {
                weight: uniform(rng, vec![*output, *input], (1.0 / *input as f64).sqrt()),
                bias: Tensor::zeros(vec![*output]),
            },
            LayerSpec::BatchNorm1d { features } => Layer::BatchNorm1d {
                gamma: Tensor::full(vec![*features], T::one()),
                beta: Tensor::zeros(vec![*features]),
                running_mean: Tensor::zeros(vec![*features]),
                running_var: Tensor::full(vec![*features], T::one()),
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Sigmoid => Layer::Sigmoid,
            LayerSpec::Prelu { channels } => Layer::Prelu {
                alpha: Tensor::full(vec![*channels], T::from_f64_lossy(PRELU_INIT)),
            },
            LayerSpec::Conv1d {
                input,
                output,
                kernel,
                ..
            } => Layer::Conv1d {
                spec: spec.clone(),
                weight: uniform(
                    rng,
                    vec![*output, input * kernel],
                    (1.0 / (input * kernel) as f64).sqrt(),
                ),
                bias: Tensor::zeros(vec![*output]),
            },
            LayerSpec::Conv1dTranspose {
                input,
                output,
                kernel,
                ..
            } => Layer::Conv1dTranspose {
                spec: spec.clone(),
                // Weight is [input, output, kernel]; fan-in follows the
                // usual transposed-conv convention of output * kernel.
                weight: uniform(
                    rng,
                    vec![*input, output * kernel],
                    (1.0 / (output * kernel) as f64).sqrt(),
                ),
                bias: Tensor::zeros(vec![*output]),
            },
            LayerSpec::LayerNorm { channels } => Layer::LayerNorm {
                gamma: Tensor::full(vec![*channels], T::one()),
                beta: Tensor::zeros(vec![*channels]),
            },
            LayerSpec::Residual { body } => Layer::Residual {
                body: body
                    .iter()
                    .map(|s| Layer::init(s, rng))
                    .collect::<Result<_>>()?,
            },
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                input: weight.dim(1),
                output: weight.dim(0),
            },
            Layer::BatchNorm1d { gamma, .. } => LayerSpec::BatchNorm1d {
                features: gamma.len(),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Sigmoid => LayerSpec::Sigmoid,
            Layer::Prelu { alpha } => LayerSpec::Prelu {
                channels: alpha.len(),
            },
            Layer::Conv1d { spec, .. } | Layer::Conv1dTranspose { spec, .. } => spec.clone(),
            Layer::LayerNorm { gamma, .. } => LayerSpec::LayerNorm {
                channels: gamma.len(),
            },
            Layer::Residual { body } => LayerSpec::Residual {
                body: body.iter().map(Layer::spec).collect(),
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.spec().kind_name()
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Linear { weight, bias }
            | Layer::Conv1d { weight, bias, .. }
            | Layer::Conv1dTranspose { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
            Layer::BatchNorm1d { gamma, beta, .. } | Layer::LayerNorm { gamma, beta } => {
                vec![("gamma", gamma), ("beta", beta)]
            }
            Layer::Prelu { alpha } => vec![("alpha", alpha)],
            Layer::Relu | Layer::Sigmoid | Layer::Residual { .. } => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias }
            | Layer::Conv1d { weight, bias, .. }
            | Layer::Conv1dTranspose { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm1d { gamma, beta, .. } | Layer::LayerNorm { gamma, beta } => {
                vec![gamma, beta]
            }
            Layer::Prelu { alpha } => vec![alpha],
            Layer::Relu | Layer::Sigmoid | Layer::Residual { .. } => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm1d {
                running_mean,
                running_var,
                ..
            } => vec![("running_mean", running_mean), ("running_var", running_var)],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BatchNorm1d {
                running_mean,
                running_var,
                ..
            } => vec![running_mean, running_var],
            _ => vec![],
        }
    }

    pub fn children(&self) -> &[Layer<T>] {
        match self {
            Layer::Residual { body } => body,
            _ => &[],
        }
    }

    pub fn children_mut(&mut self) -> &mut [Layer<T>] {
        match self {
            Layer::Residual { body } => body,
            _ => &mut [],
        }
    }

    pub fn forward(&self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, LayerCache<T>)> {
        match self {
            Layer::Linear { weight, bias } => {
                let (out, inp) = (weight.dim(0), weight.dim(1));
                if x.shape().len() != 2 || x.dim(1) != inp {
                    return Err(NnError::ShapeMismatch {
                        context: "linear input",
                        expected: vec![x.shape().first().copied().unwrap_or(0), inp],
                        actual: x.shape().to_vec(),
                    });
                }
                let batch = x.dim(0);
                let mut y = Tensor::zeros(vec![batch, out]);
                for row in y.data_mut().chunks_exact_mut(out) {
                    row.copy_from_slice(bias.data());
                }
                T::gemm(batch, inp, out, T::one(), x.data(), false, weight.data(), true, T::one(), y.data_mut());
                Ok((y, LayerCache::Input(x)))
            }
            Layer::BatchNorm1d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let f = gamma.len();
                if x.shape().len() != 2 || x.dim(1) != f {
                    return Err(NnError::ShapeMismatch {
                        context: "batchnorm1d input",
                        expected: vec![x.shape().first().copied().unwrap_or(0), f],
                        actual: x.shape().to_vec(),
                    });
                }
                let batch = x.dim(0);
                let eps = T::from_f64_lossy(BATCHNORM_EPS);
                match mode {
                    Mode::Eval => {
                        let scale: Vec<T> = gamma
                            .data()
                            .iter()
                            .zip(running_var.data())
                            .map(|(&g, &v)| g / (v + eps).sqrt())
                            .collect();
                        let mut y = x;
                        for row in y.data_mut().chunks_exact_mut(f) {
                            for j in 0..f {
                                row[j] = (row[j] - running_mean.data()[j]) * scale[j] + beta.data()[j];
                            }
                        }
                        Ok((y, LayerCache::Affine))
                    }
                    Mode::Train => {
                        if batch < 2 {
                            return Err(NnError::BatchTooSmall(batch));
                        }
                        let (xhat, mean, var) = normalize_rows(&x, batch, f);
                        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                        let mut xhat = xhat;
                        let mut y = Tensor::zeros(vec![batch, f]);
                        for (xr, yr) in xhat
                            .data_mut()
                            .chunks_exact_mut(f)
                            .zip(y.data_mut().chunks_exact_mut(f))
                        {
                            for j in 0..f {
                                xr[j] *= inv_std[j];
                                yr[j] = xr[j] * gamma.data()[j] + beta.data()[j];
                            }
                        }
                        let n = T::from_usize(batch).unwrap();
                        let unbiased = var.iter().map(|&v| v * n / (n - T::one())).collect();
                        Ok((
                            y,
                            LayerCache::Norm {
                                xhat,
                                inv_std,
                                batch_mean: mean,
                                batch_var_unbiased: unbiased,
                            },
                        ))
                    }
                }
            }
            Layer::Relu => Ok((x.map(|v| v.max(T::zero())), LayerCache::Input(x))),
            Layer::Sigmoid => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                Ok((y.clone(), LayerCache::Output(y)))
            }
            Layer::Prelu { alpha } => {
                let (channels, inner) = channel_layout(&x, alpha.len(), "prelu input")?;
                let mut y = x.clone();
                for (idx, v) in y.data_mut().iter_mut().enumerate() {
                    if *v < T::zero() {
                        *v *= alpha.data()[(idx / inner) % channels];
                    }
                }
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Conv1d { spec, weight, bias } => {
                let (cin, cout, g) = conv_geom(spec);
                let (batch, tin) = conv_input(&x, cin, "conv1d input")?;
                let tout = g.conv_out_len(tin).ok_or(NnError::ShapeMismatch {
                    context: "conv1d input shorter than kernel span",
                    expected: vec![batch, cin, g.dilation * (g.kernel - 1) + 1],
                    actual: x.shape().to_vec(),
                })?;
                let ck = cin * g.kernel;
                let mut cols = vec![T::zero(); ck * tout];
                let mut y = Tensor::zeros(vec![batch, cout, tout]);
                for (xb, yb) in x
                    .data()
                    .chunks_exact(cin * tin)
                    .zip(y.data_mut().chunks_exact_mut(cout * tout))
                {
                    im2col(xb, g, tin, tout, &mut cols);
                    for (co, row) in yb.chunks_exact_mut(tout).enumerate() {
                        row.fill(bias.data()[co]);
                    }
                    T::gemm(cout, ck, tout, T::one(), weight.data(), false, &cols, false, T::one(), yb);
                }
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Conv1dTranspose { spec, weight, bias } => {
                let (cin, cout, g) = conv_geom(spec);
                let (batch, tin) = conv_input(&x, cin, "conv1d_transpose input")?;
                let tout = g.transposed_out_len(tin).ok_or(NnError::ShapeMismatch {
                    context: "conv1d_transpose padding exceeds output",
                    expected: vec![batch, cin, tin],
                    actual: x.shape().to_vec(),
                })?;
                let ck = cout * g.kernel;
                let mut cols = vec![T::zero(); ck * tin];
                let mut y = Tensor::zeros(vec![batch, cout, tout]);
                for (xb, yb) in x
                    .data()
                    .chunks_exact(cin * tin)
                    .zip(y.data_mut().chunks_exact_mut(cout * tout))
                {
                    T::gemm(ck, cin, tin, T::one(), weight.data(), true, xb, false, T::zero(), &mut cols);
                    for (co, row) in yb.chunks_exact_mut(tout).enumerate() {
                        row.fill(bias.data()[co]);
                    }
                    col2im(&cols, g, tout, tin, yb);
                }
                Ok((y, LayerCache::Input(x)))
            }
            Layer::LayerNorm { gamma, beta } => {
                let c = gamma.len();
                let (batch, t) = conv_input(&x, c, "layernorm input")?;
                let eps = T::from_f64_lossy(LAYERNORM_EPS);
                let n = T::from_usize(c).unwrap();
                let mut xhat = x;
                let mut inv_std = vec![T::zero(); batch * t];
                for (b, xb) in xhat.data_mut().chunks_exact_mut(c * t).enumerate() {
                    let mut mean = vec![T::zero(); t];
                    for row in xb.chunks_exact(t) {
                        for (m, &v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n);
                    let mut var = vec![T::zero(); t];
                    for row in xb.chunks_exact(t) {
                        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    let istd = &mut inv_std[b * t..(b + 1) * t];
                    for (i, s) in istd.iter_mut().zip(&var) {
                        *i = T::one() / (*s / n + eps).sqrt();
                    }
                    for row in xb.chunks_exact_mut(t) {
                        for ((v, &m), &i) in row.iter_mut().zip(&mean).zip(istd.iter()) {
                            *v = (*v - m) * i;
                        }
                    }
                }
                let mut y = xhat.clone();
                for yb in y.data_mut().chunks_exact_mut(c * t) {
                    for (ch, row) in yb.chunks_exact_mut(t).enumerate() {
                        let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
                        row.iter_mut().for_each(|v| *v = *v * gv + bv);
                    }
                }
                Ok((
                    y,
                    LayerCache::Norm {
                        xhat,
                        inv_std,
                        batch_mean: vec![],
                        batch_var_unbiased: vec![],
                    },
                ))
            }
            Layer::Residual { body } => {
                let mut h = x.clone();
                let mut caches = Vec::with_capacity(body.len());
                for layer in body {
                    let (out, cache) = layer.forward(h, mode)?;
                    h = out;
                    caches.push(cache);
                }
                h.add_assign(&x).map_err(|_| NnError::ShapeMismatch {
                    context: "residual body must preserve shape",
                    expected: x.shape().to_vec(),
                    actual: h.shape().to_vec(),
                })?;
                Ok((h, LayerCache::Residual(caches)))
            }
        }
    }

    /// Applies the running-statistic update recorded by a train-mode forward.
    pub fn update_running_stats(&mut self, cache: &LayerCache<T>) {
        let m = T::from_f64_lossy(BATCHNORM_MOMENTUM);
        match (self, cache) {
            (
                Layer::BatchNorm1d {
                    running_mean,
                    running_var,
                    ..
                },
                LayerCache::Norm {
                    batch_mean,
                    batch_var_unbiased,
                    ..
                },
            ) => {
                for (r, &b) in running_mean.data_mut().iter_mut().zip(batch_mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                for (r, &b) in running_var.data_mut().iter_mut().zip(batch_var_unbiased) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            (Layer::Residual { body }, LayerCache::Residual(caches)) => {
                for (layer, c) in body.iter_mut().zip(caches) {
                    layer.update_running_stats(c);
                }
            }
            _ => {}
        }
    }

    /// Returns the input gradient; appends this layer's parameter gradients
    /// (in [`Layer::params`] order, nested layers depth-first) to `grads`.
    pub fn backward(&self, cache: &LayerCache<T>, dy: Tensor<T>, grads: &mut Vec<Tensor<T>>) -> Result<Tensor<T>> {
        let mismatch = || NnError::StaleCache("cache kind does not match layer");
        match (self, cache) {
            (Layer::Linear { weight, .. }, LayerCache::Input(x)) => {
                let (out, inp) = (weight.dim(0), weight.dim(1));
                let batch = x.dim(0);
                dy.expect_shape(&[batch, out], "linear output gradient")?;
                let mut dw = Tensor::zeros(vec![out, inp]);
                T::gemm(out, batch, inp, T::one(), dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
                let mut db = Tensor::zeros(vec![out]);
                for row in dy.data().chunks_exact(out) {
                    for (d, &g) in db.data_mut().iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let mut dx = Tensor::zeros(vec![batch, inp]);
                T::gemm(batch, out, inp, T::one(), dy.data(), false, weight.data(), false, T::zero(), dx.data_mut());
                grads.push(dw);
                grads.push(db);
                Ok(dx)
            }
            (Layer::BatchNorm1d { gamma, .. }, LayerCache::Norm { xhat, inv_std, .. }) => {
                let f = gamma.len();
                dy.expect_same_shape(xhat, "batchnorm1d output gradient")?;
                let batch = xhat.dim(0);
                let n = T::from_usize(batch).unwrap();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for (dr, xr) in dy.data().chunks_exact(f).zip(xhat.data().chunks_exact(f)) {
                    for j in 0..f {
                        dgamma[j] += dr[j] * xr[j];
                        dbeta[j] += dr[j];
                    }
                }
                // dx = g * istd / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
                let mut dx = Tensor::zeros(vec![batch, f]);
                for ((out, dr), xr) in dx
                    .data_mut()
                    .chunks_exact_mut(f)
                    .zip(dy.data().chunks_exact(f))
                    .zip(xhat.data().chunks_exact(f))
                {
                    for j in 0..f {
                        out[j] = gamma.data()[j] * inv_std[j] / n * (n * dr[j] - dbeta[j] - xr[j] * dgamma[j]);
                    }
                }
                grads.push(Tensor::new(vec![f], dgamma)?);
                grads.push(Tensor::new(vec![f], dbeta)?);
                Ok(dx)
            }
            (Layer::BatchNorm1d { .. }, LayerCache::Affine) => Err(NnError::StaleCache(
                "backward requires a train-mode forward pass",
            )),
            (Layer::Relu, LayerCache::Input(x)) => {
                dy.expect_same_shape(x, "relu output gradient")?;
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                Ok(dx)
            }
            (Layer::Sigmoid, LayerCache::Output(y)) => {
                dy.expect_same_shape(y, "sigmoid output gradient")?;
                let mut dx = dy;
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (T::one() - s);
                }
                Ok(dx)
            }
            (Layer::Prelu { alpha }, LayerCache::Input(x)) => {
                dy.expect_same_shape(x, "prelu output gradient")?;
                let (channels, inner) = channel_layout(x, alpha.len(), "prelu input")?;
                let mut dalpha = vec![T::zero(); channels];
                let mut dx = dy;
                for (idx, (d, &v)) in dx.data_mut().iter_mut().zip(x.data()).enumerate() {
                    if v < T::zero() {
                        let c = (idx / inner) % channels;
                        dalpha[c] += *d * v;
                        *d *= alpha.data()[c];
                    }
                }
                grads.push(Tensor::new(vec![channels], dalpha)?);
                Ok(dx)
            }
            (Layer::Conv1d { spec, weight, .. }, LayerCache::Input(x)) => {
                let (cin, cout, g) = conv_geom(spec);
                let (batch, tin) = (x.dim(0), x.dim(2));
                let tout = g.conv_out_len(tin).ok_or_else(mismatch)?;
                dy.expect_shape(&[batch, cout, tout], "conv1d output gradient")?;
                let ck = cin * g.kernel;
                let mut cols = vec![T::zero(); ck * tout];
                let mut dcols = vec![T::zero(); ck * tout];
                let mut dw = Tensor::zeros(vec![cout, ck]);
                let mut db = Tensor::zeros(vec![cout]);
                let mut dx = Tensor::zeros(vec![batch, cin, tin]);
                for ((xb, dyb), dxb) in x
                    .data()
                    .chunks_exact(cin * tin)
                    .zip(dy.data().chunks_exact(cout * tout))
                    .zip(dx.data_mut().chunks_exact_mut(cin * tin))
                {
                    im2col(xb, g, tin, tout, &mut cols);
                    T::gemm(cout, tout, ck, T::one(), dyb, false, &cols, true, T::one(), dw.data_mut());
                    T::gemm(ck, cout, tout, T::one(), weight.data(), true, dyb, false, T::zero(), &mut dcols);
                    col2im(&dcols, g, tin, tout, dxb);
                    for (d, row) in db.data_mut().iter_mut().zip(dyb.chunks_exact(tout)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
                grads.push(dw);
                grads.push(db);
                Ok(dx)
            }
            (Layer::Conv1dTranspose { spec, weight, .. }, LayerCache::Input(x)) => {
                let (cin, cout, g) = conv_geom(spec);
                let (batch, tin) = (x.dim(0), x.dim(2));
                let tout = g.transposed_out_len(tin).ok_or_else(mismatch)?;
                dy.expect_shape(&[batch, cout, tout], "conv1d_transpose output gradient")?;
                let ck = cout * g.kernel;
                let mut dcols = vec![T::zero(); ck * tin];
                let mut dw = Tensor::zeros(vec![cin, ck]);
                let mut db = Tensor::zeros(vec![cout]);
                let mut dx = Tensor::zeros(vec![batch, cin, tin]);
                for ((xb, dyb), dxb) in x
                    .data()
                    .chunks_exact(cin * tin)
                    .zip(dy.data().chunks_exact(cout * tout))
                    .zip(dx.data_mut().chunks_exact_mut(cin * tin))
                {
                    im2col(dyb, g, tout, tin, &mut dcols);
                    T::gemm(cin, tin, ck, T::one(), xb, false, &dcols, true, T::one(), dw.data_mut());
                    T::gemm(cin, ck, tin, T::one(), weight.data(), false, &dcols, false, T::zero(), dxb);
                    for (d, row) in db.data_mut().iter_mut().zip(dyb.chunks_exact(tout)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
                grads.push(dw);
                grads.push(db);
                Ok(dx)
            }
            (Layer::LayerNorm { gamma, .. }, LayerCache::Norm { xhat, inv_std, .. }) => {
                dy.expect_same_shape(xhat, "layernorm output gradient")?;
                let c = gamma.len();
                let (batch, t) = (xhat.dim(0), xhat.dim(2));
                let n = T::from_usize(c).unwrap();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Tensor::zeros(vec![batch, c, t]);
                for b in 0..batch {
                    let range = b * c * t..(b + 1) * c * t;
                    let (dyb, xb) = (&dy.data()[range.clone()], &xhat.data()[range.clone()]);
                    // Per time step: sum over channels of g*dy and g*dy*xhat.
                    let mut s1 = vec![T::zero(); t];
                    let mut s2 = vec![T::zero(); t];
                    for ch in 0..c {
                        let g = gamma.data()[ch];
                        let (dr, xr) = (&dyb[ch * t..(ch + 1) * t], &xb[ch * t..(ch + 1) * t]);
                        for i in 0..t {
                            dgamma[ch] += dr[i] * xr[i];
                            dbeta[ch] += dr[i];
                            s1[i] += g * dr[i];
                            s2[i] += g * dr[i] * xr[i];
                        }
                    }
                    let istd = &inv_std[b * t..(b + 1) * t];
                    let dxb = &mut dx.data_mut()[range];
                    for ch in 0..c {
                        let g = gamma.data()[ch];
                        for i in 0..t {
                            let k = ch * t + i;
                            dxb[k] = istd[i] / n * (n * g * dyb[k] - s1[i] - xb[k] * s2[i]);
                        }
                    }
                }
                grads.push(Tensor::new(vec![c], dgamma)?);
                grads.push(Tensor::new(vec![c], dbeta)?);
                Ok(dx)
            }
            (Layer::Residual { body }, LayerCache::Residual(caches)) => {
                if caches.len() != body.len() {
                    return Err(mismatch());
                }
                let mut per_layer = Vec::with_capacity(body.len());
                let mut g = dy.clone();
                for (layer, c) in body.iter().zip(caches).rev() {
                    let mut local = Vec::new();
                    g = layer.backward(c, g, &mut local)?;
                    per_layer.push(local);
                }
                for local in per_layer.into_iter().rev() {
                    grads.extend(local);
                }
                g.add_assign(&dy)?;
                Ok(g)
            }
            _ => Err(mismatch()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Linear { weight, bias } => Layer::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::BatchNorm1d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => Layer::BatchNorm1d {
                gamma: gamma.cast(),
                beta: beta.cast(),
                running_mean: running_mean.cast(),
                running_var: running_var.cast(),
            },
            Layer::Relu => Layer::Relu,
            Layer::Sigmoid => Layer::Sigmoid,
            Layer::Prelu { alpha } => Layer::Prelu { alpha: alpha.cast() },
            Layer::Conv1d { spec, weight, bias } => Layer::Conv1d {
                spec: spec.clone(),
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::Conv1dTranspose { spec, weight, bias } => Layer::Conv1dTranspose {
                spec: spec.clone(),
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::LayerNorm { gamma, beta } => Layer::LayerNorm {
                gamma: gamma.cast(),
                beta: beta.cast(),
            },
            Layer::Residual { body } => Layer::Residual {
                body: body.iter().map(Layer::cast).collect(),
            },
        }
    }
}

/// Returns centered rows plus per-column mean and biased variance.
fn normalize_rows<T: Scalar>(x: &Tensor<T>, batch: usize, f: usize) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize(batch).unwrap();
    let mut mean = vec![T::zero(); f];
    for row in x.data().chunks_exact(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut centered = x.clone();
    let mut var = vec![T::zero(); f];
    for row in centered.data_mut().chunks_exact_mut(f) {
        for j in 0..f {
            row[j] -= mean[j];
            var[j] += row[j] * row[j];
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (centered, mean, var)
}

fn conv_input<T: Scalar>(x: &Tensor<T>, channels: usize, context: &'static str) -> Result<(usize, usize)> {
    if x.shape().len() != 3 || x.dim(1) != channels {
        return Err(NnError::ShapeMismatch {
            context,
            expected: vec![x.shape().first().copied().unwrap_or(0), channels, x.shape().last().copied().unwrap_or(0)],
            actual: x.shape().to_vec(),
        });
    }
    Ok((x.dim(0), x.dim(2)))
}

/// Channel axis is 1; returns (channels, elements per channel slice).
fn channel_layout<T: Scalar>(x: &Tensor<T>, channels: usize, context: &'static str) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(NnError::ShapeMismatch {
            context,
            expected: vec![shape.first().copied().unwrap_or(0), channels],
            actual: shape.to_vec(),
        });
    }
    Ok((channels, shape[2..].iter().product()))
}
