use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{NnError, Result};
use crate::layer::{Layer, LayerCache, LayerSpec, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// A fixed sequential stack of layers.
#[derive(Debug)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    uid: u64,
    version: u64,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            uid: fresh_uid(),
            version: 0,
        }
    }
}

/// Activation record of one forward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    uid: u64,
    version: u64,
    mode: Mode,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::init(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(layers))
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Self {
        Self {
            layers,
            uid: fresh_uid(),
            version: 0,
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Forward pass. Train mode uses batch statistics and updates running
    /// statistics; eval mode uses the running statistics.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (y, caches) = run(&self.layers, x, mode)?;
        if mode == Mode::Train {
            for (layer, cache) in self.layers.iter_mut().zip(&caches) {
                layer.update_running_stats(cache);
            }
        }
        Ok((
            y,
            ForwardCache {
                uid: self.uid,
                version: self.version,
                mode,
                layers: caches,
            },
        ))
    }

    /// Train-mode forward without touching running statistics.
    pub fn forward_frozen_stats(&self, x: Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (y, caches) = run(&self.layers, x, Mode::Train)?;
        Ok((
            y,
            ForwardCache {
                uid: self.uid,
                version: self.version,
                mode: Mode::Train,
                layers: caches,
            },
        ))
    }

    /// Eval-mode forward over shared (read-only) parameters.
    pub fn infer(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        run(&self.layers, x, Mode::Eval).map(|(y, _)| y)
    }

    /// Reverse pass. Returns parameter gradients (aligned with
    /// [`Network::params`]) and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache<T>, output_grad: Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        if cache.uid != self.uid {
            return Err(NnError::StaleCache("cache belongs to a different network"));
        }
        if cache.version != self.version {
            return Err(NnError::StaleCache("parameters changed since the forward pass"));
        }
        if cache.mode != Mode::Train {
            return Err(NnError::StaleCache("backward requires a train-mode forward pass"));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(NnError::StaleCache("layer count differs"));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = output_grad;
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let mut local = Vec::new();
            g = layer.backward(c, g, &mut local)?;
            per_layer.push(local);
        }
        let grads = per_layer.into_iter().rev().flatten().collect();
        Ok((grads, g))
    }

    /// Trainable tensors with dotted names such as `3.weight` or `2.body.0.alpha`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit(&self.layers, "", &mut |prefix, layer| {
            for (name, t) in layer.params() {
                out.push((format!("{prefix}{name}"), t));
            }
        });
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.version += 1;
        let mut out = Vec::new();
        collect_mut(&mut self.layers, Layer::params_mut, &mut out);
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        visit(&self.layers, "", &mut |prefix, layer| {
            for (name, t) in layer.buffers() {
                out.push((format!("{prefix}{name}"), t));
            }
        });
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        collect_mut(&mut self.layers, Layer::buffers_mut, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network::from_layers(self.layers.iter().map(Layer::cast).collect())
    }
}

fn run<T: Scalar>(layers: &[Layer<T>], x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut h = x;
    let mut caches = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (out, cache) = layer.forward(h, mode)?;
        if !out.is_finite() {
            return Err(NnError::NonFinite {
                layer: i,
                kind: layer.kind_name(),
            });
        }
        h = out;
        caches.push(cache);
    }
    Ok((h, caches))
}

fn visit<'a, T: Scalar>(layers: &'a [Layer<T>], prefix: &str, f: &mut impl FnMut(&str, &'a Layer<T>)) {
    for (i, layer) in layers.iter().enumerate() {
        let p = format!("{prefix}{i}.");
        f(&p, layer);
        if !layer.children().is_empty() {
            visit(layer.children(), &format!("{p}body."), f);
        }
    }
}

fn collect_mut<'a, T: Scalar>(
    layers: &'a mut [Layer<T>],
    pick: fn(&'a mut Layer<T>) -> Vec<&'a mut Tensor<T>>,
    out: &mut Vec<&'a mut Tensor<T>>,
) {
    for layer in layers.iter_mut() {
        match layer {
            Layer::Residual { body } => collect_mut(body, pick, out),
            other => out.extend(pick(other)),
        }
    }
}
