//! Parameter checkpoints: a JSON manifest (names, shapes, dtype, order)
//! next to a raw little-endian payload. Round trips are bit-exact,
//! including batchnorm running statistics.

use std::path::Path;

use super::graph::NetworkGraph;
use super::Scalar;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mpseg-checkpoint-v1";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    role: String,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    payload: String,
    entries: Vec<Entry>,
}

fn payload_path(manifest_path: &Path, payload: &str) -> std::path::PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(payload)
}

/// Write the graph's parameters and buffers to `path` (a .json manifest)
/// plus a sibling .bin payload.
pub fn save_checkpoint<T: Scalar>(graph: &NetworkGraph<T>, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("checkpoint path {} has no stem", path.display())))?;
    let payload_name = format!("{stem}.bin");
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    for p in &graph.params {
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            role: "param".into(),
        });
        for v in p.value.iter() {
            v.write_le(&mut bytes);
        }
    }
    for b in &graph.buffers {
        entries.push(Entry {
            name: b.name.clone(),
            shape: b.value.shape().to_vec(),
            role: "buffer".into(),
        });
        for v in b.value.iter() {
            v.write_le(&mut bytes);
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: T::DTYPE.into(),
        payload: payload_name.clone(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("serialize checkpoint manifest: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let ppath = payload_path(path, &payload_name);
    std::fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

/// Load a checkpoint into a graph of identical structure; every name and
/// shape must match the manifest in order.
pub fn load_checkpoint<T: Scalar>(graph: &mut NetworkGraph<T>, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse checkpoint: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!(
            "unrecognized checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::data(format!(
            "checkpoint dtype {} does not match graph dtype {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let expected = graph.params.len() + graph.buffers.len();
    if manifest.entries.len() != expected {
        return Err(Error::data(format!(
            "checkpoint has {} entries, graph needs {expected}",
            manifest.entries.len()
        )));
    }
    let ppath = payload_path(path, &manifest.payload);
    let bytes = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let total: usize = manifest
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * T::BYTES {
        return Err(Error::data(format!(
            "checkpoint payload is {} bytes, expected {}",
            bytes.len(),
            total * T::BYTES
        )));
    }
    let mut offset = 0usize;
    let n_params = graph.params.len();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let (name, value): (&str, &mut ndarray::ArrayD<T>) = if i < n_params {
            if entry.role != "param" {
                return Err(Error::data(format!(
                    "entry {} has role {:?}, expected param",
                    entry.name, entry.role
                )));
            }
            let p = &mut graph.params[i];
            (&p.name, &mut p.value)
        } else {
            if entry.role != "buffer" {
                return Err(Error::data(format!(
                    "entry {} has role {:?}, expected buffer",
                    entry.name, entry.role
                )));
            }
            let b = &mut graph.buffers[i - n_params];
            (&b.name, &mut b.value)
        };
        if entry.name != name {
            return Err(Error::data(format!(
                "checkpoint entry {:?} does not match graph entry {:?}",
                entry.name, name
            )));
        }
        if entry.shape != value.shape() {
            return Err(Error::data(format!(
                "checkpoint entry {} has shape {:?}, graph expects {:?}",
                entry.name,
                entry.shape,
                value.shape()
            )));
        }
        for v in value.iter_mut() {
            *v = T::read_le(&bytes[offset..offset + T::BYTES]);
            offset += T::BYTES;
        }
    }
    Ok(())
}
