//! Weight container.
//!
//! ```text
//! "GRFW1" | u64 LE manifest length | manifest (UTF-8 JSON) | tensor data
//! ```
//!
//! The manifest holds the model configuration in its text form and, per
//! tensor, the name, dtype, shape and byte offset into the data section.
//! Data is little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::network::{init_parameters, GrformerParams};
use crate::params::{flatten, ParamTree};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GRFW1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Scalar>(cfg: &ModelConfig, params: &GrformerParams<T>) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in flatten(params) {
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE.into(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let manifest = Manifest { config: cfg.to_text(), tensors };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err("not a GRFW1 weight file"));
    }
    let len_bytes: [u8; 8] = bytes[5..13].try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let body = &bytes[13..];
    if len > body.len() {
        return Err(format_err(format!("manifest length {len} exceeds file size")));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| format_err(format!("manifest: {e}")))?;
    Ok((manifest, &body[len..]))
}

fn read_tensor<T: Scalar>(entry: &TensorEntry, data: &[u8]) -> Result<Tensor<T>> {
    let width = match entry.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(format_err(format!("{}: unsupported dtype {other}", entry.name))),
    };
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + n * width;
    if end > data.len() {
        return Err(format_err(format!("{}: data runs past end of file", entry.name)));
    }
    let values = data[start..end]
        .chunks_exact(width)
        .map(|b| if width == 4 { T::from_f64c(f32::read_le(b) as f64) } else { T::from_f64c(f64::read_le(b)) })
        .collect();
    Tensor::new(entry.shape.clone(), values)
}

/// Decodes a container. Stored values of another precision are converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, GrformerParams<T>)> {
    let (manifest, data) = read_manifest(bytes)?;
    let cfg = ModelConfig::parse(&manifest.config)?;
    cfg.validate()?;
    let mut params: GrformerParams<T> = init_parameters(&cfg, &mut Rng::new(0));
    let expected = flatten(&params);
    if expected.len() != manifest.tensors.len() {
        return Err(format_err(format!(
            "config expects {} tensors, file has {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(format_err(format!(
                "tensor {} {:?} does not match config tensor {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        loaded.push(read_tensor::<T>(entry, data)?);
    }
    let mut it = loaded.into_iter();
    params.visit_mut("", &mut |_, t| *t = it.next().expect("one tensor per leaf"));
    Ok((cfg, params))
}

pub fn save<T: Scalar>(path: &Path, cfg: &ModelConfig, params: &GrformerParams<T>) -> Result<()> {
    std::fs::write(path, encode(cfg, params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ModelConfig, GrformerParams<T>)> {
    decode(&std::fs::read(path)?)
}

/// Fails unless `expected` equals the configuration stored with the weights.
pub fn ensure_config(expected: &ModelConfig, stored: &ModelConfig) -> Result<()> {
    if expected == stored {
        return Ok(());
    }
    let a = expected.to_text();
    let b = stored.to_text();
    let diff: Vec<String> = a
        .lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("requested `{x}`, weights have `{y}`"))
        .collect();
    Err(Error::Contract(format!("weights do not match the configuration: {}", diff.join("; "))))
}
