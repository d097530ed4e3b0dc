//! Checkpoint directories: `meta.json` (layer names, shapes, config hash and
//! caller state), `params.bin` with every parameter as little-endian f32 in
//! declaration order, and optionally `velocity.bin` with the optimiser
//! buffers in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta.json";
const PARAMS: &str = "params.bin";
const VELOCITY: &str = "velocity.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub layers: Vec<LayerMeta>,
    pub has_velocity: bool,
    /// Free-form caller state (training progress and the like).
    pub state: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<Tensor<f32>>,
    pub velocity: Option<Vec<Tensor<f32>>>,
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json values serialise");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensors(path: &Path, tensors: &[&Tensor<f32>]) -> Result<()> {
    let n: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(4 * n);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_tensors(path: &Path, layers: &[LayerMeta]) -> Result<Vec<Tensor<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want: usize = layers
        .iter()
        .map(|l| l.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 4 * want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected {} bytes, found {}", 4 * want, bytes.len()),
        });
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    layers
        .iter()
        .map(|l| {
            let n = l.shape.iter().product();
            Tensor::from_vec(&l.shape, values.by_ref().take(n).collect())
        })
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    config: &serde_json::Value,
    params: &[(String, &Tensor<f32>)],
    velocity: Option<&[&Tensor<f32>]>,
    state: serde_json::Value,
) -> Result<()> {
    if let Some(v) = velocity {
        if v.len() != params.len()
            || v.iter()
                .zip(params)
                .any(|(a, (_, b))| a.shape() != b.shape())
        {
            return Err(Error::Input(
                "velocity buffers do not match the parameters".into(),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(config),
        config: config.clone(),
        layers: params
            .iter()
            .map(|(n, t)| LayerMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        has_velocity: velocity.is_some(),
        state,
    };
    let p = dir.join(META);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let tensors: Vec<&Tensor<f32>> = params.iter().map(|(_, t)| *t).collect();
    write_tensors(&dir.join(PARAMS), &tensors)?;
    match velocity {
        Some(v) => write_tensors(&dir.join(VELOCITY), v)?,
        None => {
            let _ = fs::remove_file(dir.join(VELOCITY));
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let p = dir.join(META);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: p,
            line: 0,
            msg: format!("unsupported checkpoint version {}", meta.format_version),
        });
    }
    if config_hash(&meta.config) != meta.config_hash {
        return Err(Error::Format {
            path: p,
            line: 0,
            msg: "config hash does not match the stored config".into(),
        });
    }
    let params = read_tensors(&dir.join(PARAMS), &meta.layers)?;
    let velocity = if meta.has_velocity {
        Some(read_tensors(&dir.join(VELOCITY), &meta.layers)?)
    } else {
        None
    };
    Ok(Checkpoint {
        meta,
        params,
        velocity,
    })
}

/// Copy checkpoint tensors into `targets`, checking names and shapes.
pub fn restore_params(
    ckpt_layers: &[LayerMeta],
    values: &[Tensor<f32>],
    targets: Vec<(String, &mut Tensor<f32>)>,
) -> Result<()> {
    if targets.len() != ckpt_layers.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt_layers.len(),
            targets.len()
        )));
    }
    for ((layer, value), (name, t)) in ckpt_layers.iter().zip(values).zip(targets) {
        if layer.name != name || layer.shape != t.shape() {
            return Err(Error::Input(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                layer.name,
                layer.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(value.data());
    }
    Ok(())
}
