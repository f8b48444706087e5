//! Synthetic machine-sound datasets, a masked time-domain separator, an
//! autoencoder anomaly detector and the evaluation pipelines that combine them.

pub mod audio;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod separator;
pub mod synth;

pub use audio::{AudioClip, NoiseKind, WavEncoding};
pub use error::{Error, Result};
