//! Minimal deterministic training engine.
//!
//! Fixed sequential networks ([`Network`]) built from [`LayerSpec`]s, with
//! hand-written reverse passes for every layer kind, the Adam optimizer,
//! MSE/L1 losses, a finite-difference gradient checker, and a simple
//! on-disk checkpoint format (`meta.json` + `weights.bin`).
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification). No internal threading: given the same seed and
//! data order, training is bit-reproducible.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::{NnError, Result};
pub use layer::{Layer, LayerSpec, Mode};
pub use network::{ForwardCache, Network};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
