//! On-disk model format.
//!
//! A checkpoint is a directory holding `meta.json` (schema version, layer
//! specs per network, tensor names and shapes, seed, training config, epoch
//! count, free-form extras) and `weights.bin` (little-endian `f32`, tensors
//! concatenated in `meta.tensors` order).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{NnError, Result};
use crate::layer::LayerSpec;
use crate::network::Network;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// What the checkpoint holds, e.g. `"separator"` or `"detector"`.
    pub model_kind: String,
    pub networks: Vec<NetworkMeta>,
    pub tensors: Vec<TensorMeta>,
    pub seed: u64,
    pub train_config: Value,
    pub epochs: usize,
    #[serde(default)]
    pub extra: Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub networks: Vec<(String, Network<f32>)>,
}

fn tensor_list(networks: &[(String, Network<f32>)]) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (name, net) in networks {
        for (t_name, t) in net.named_params().into_iter().chain(net.named_buffers()) {
            out.push((format!("{name}/{t_name}"), t));
        }
    }
    out
}

impl Checkpoint {
    pub fn new(
        model_kind: &str,
        networks: Vec<(String, Network<f32>)>,
        seed: u64,
        train_config: Value,
        epochs: usize,
        extra: Value,
    ) -> Self {
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            model_kind: model_kind.to_string(),
            networks: networks
                .iter()
                .map(|(name, net)| NetworkMeta {
                    name: name.clone(),
                    layers: net.specs(),
                })
                .collect(),
            tensors: tensor_list(&networks)
                .into_iter()
                .map(|(name, t)| TensorMeta {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            seed,
            train_config,
            epochs,
            extra,
        };
        Self { meta, networks }
    }

    pub fn network(&self, name: &str) -> Option<&Network<f32>> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = serde_json::to_vec_pretty(&self.meta)?;
        meta.push(b'\n');
        fs::write(dir.join(META_FILE), meta)?;
        let tensors = tensor_list(&self.networks);
        let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut bytes = Vec::with_capacity(total * 4);
        for (_, t) in tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(dir.join(WEIGHTS_FILE))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(NnError::Format(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                meta.schema_version
            )));
        }
        let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
        let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() != declared * 4 {
            return Err(NnError::Format(format!(
                "weights.bin holds {} bytes but meta declares {} f32 values",
                bytes.len(),
                declared
            )));
        }

        // Parameters are overwritten below; the init rng only fixes shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut networks = Vec::with_capacity(meta.networks.len());
        for nm in &meta.networks {
            networks.push((nm.name.clone(), Network::<f32>::new(&nm.layers, &mut rng)?));
        }
        let expected: Vec<(String, Vec<usize>)> = tensor_list(&networks)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let listed: Vec<(String, Vec<usize>)> = meta.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != listed {
            return Err(NnError::Format(
                "tensor list in meta.json does not match the declared layers".into(),
            ));
        }

        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for (_, net) in networks.iter_mut() {
            for t in net.params_mut() {
                for slot in t.data_mut() {
                    *slot = values.next().expect("length validated");
                }
            }
            for t in net.buffers_mut() {
                for slot in t.data_mut() {
                    *slot = values.next().expect("length validated");
                }
            }
        }
        Ok(Self { meta, networks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Mode;

    fn small_net() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Network::new(
            &[
                LayerSpec::Linear { input: 3, output: 4 },
                LayerSpec::BatchNorm1d { features: 4 },
                LayerSpec::Relu,
                LayerSpec::Linear { input: 4, output: 2 },
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = small_net();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        net.forward(x.clone(), Mode::Train).unwrap();
        let ckpt = Checkpoint::new("test", vec![("net".into(), net)], 7, Value::Null, 3, Value::Null);
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        let a = ckpt.network("net").unwrap();
        let b = back.network("net").unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.named_buffers(), b.named_buffers());
        assert_eq!(a.infer(x.clone()).unwrap(), b.infer(x).unwrap());
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new("test", vec![("net".into(), small_net())], 1, Value::Null, 0, Value::Null);
        ckpt.save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(NnError::Format(_))));
    }
}
