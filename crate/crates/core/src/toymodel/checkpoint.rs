//! Checkpoints: a flat little-endian f64 file plus a JSON sidecar
//! (`<path>.json`) with tensor names, shapes, the model config and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{KsaError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub cfg: ModelConfig,
    pub seed: u64,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    params: &Params<T>,
    seed: u64,
) -> Result<()> {
    let named = params.named();
    let mut bytes = Vec::with_capacity(params.num_parameters() * 8);
    for (_, t) in &named {
        for x in t.data() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        names: named.iter().map(|(n, _)| n.clone()).collect(),
        shapes: named.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        cfg: cfg.clone(),
        seed,
    };
    fs::write(path, bytes)?;
    fs::write(
        sidecar(path),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, Params<T>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let bytes = fs::read(path)?;
    let mut params = Params::<T>::init(&manifest.cfg)?;
    let expected: Vec<Vec<usize>> = params
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    if expected != manifest.shapes {
        return Err(KsaError::Shape(
            "checkpoint shapes do not match its config".into(),
        ));
    }
    let total: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(KsaError::Io(format!(
            "checkpoint holds {} bytes, expected {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    for t in params.tensors_mut() {
        let data: Vec<T> = values.by_ref().take(t.len()).collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("ksa-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let cfg = ModelConfig {
            seed: 4,
            ..ModelConfig::default()
        };
        let p = Params::<f64>::init(&cfg).unwrap();
        save_checkpoint(&path, &cfg, &p, 4).unwrap();
        let (m, q) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(m.cfg, cfg);
        assert_eq!(m.seed, 4);
        assert_eq!(p, q);
        fs::write(&path, [0u8; 16]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
