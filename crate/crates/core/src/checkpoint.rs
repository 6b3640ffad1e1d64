//! Checkpoint archives: `manifest.json`, `topology.json` and one
//! little-endian blob per tensor under `tensors/`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Real;
use crate::error::ModelError;
use crate::model::{ArchConfig, TreeModel};
use crate::topology::{TopologyJson, TreeTopology};

const FORMAT: u32 = 1;
const CHECKSUM: &str = "checksum.sha256";

/// Hex SHA-256 over entry names and contents, in archive order.
fn digest<'a>(entries: impl Iterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dtype: String,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
    /// Modules whose parameters were frozen when saved.
    frozen: Vec<String>,
}

fn corrupt(field: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn append<W: Write>(builder: &mut tar::Builder<W>, name: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, data)
}

pub fn save_checkpoint<F: Real>(model: &TreeModel<F>, path: &Path) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (buffer, list) in [(false, model.named_params()), (true, model.named_buffers())] {
        for (name, a) in list {
            let mut bytes = Vec::with_capacity(a.len() * F::BYTES);
            for &v in a.iter() {
                v.write_le(&mut bytes);
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: [a.nrows(), a.ncols()],
                buffer,
            });
            blobs.push((name, bytes));
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        dtype: F::DTYPE.to_string(),
        arch: model.arch.clone(),
        tensors,
        frozen: model
            .modules()
            .into_iter()
            .filter(|(_, m)| !m.trainable)
            .map(|(n, _)| n)
            .collect(),
    };
    let manifest = serde_json::to_vec_pretty(&manifest).expect("serializable");
    let topology = serde_json::to_vec_pretty(&model.topology.to_json()).expect("serializable");

    let file = File::create(path).map_err(io_err(path))?;
    let mut builder = tar::Builder::new(BufWriter::new(file));
    let mut entries = vec![
        ("manifest.json".to_string(), manifest),
        ("topology.json".to_string(), topology),
    ];
    entries.extend(blobs.into_iter().map(|(n, b)| (format!("tensors/{n}.bin"), b)));
    let digest = digest(entries.iter().map(|(n, b)| (n.as_str(), b.as_slice())));
    let write = |builder: &mut tar::Builder<_>| -> std::io::Result<()> {
        for (name, bytes) in &entries {
            append(builder, name, bytes)?;
        }
        append(builder, CHECKSUM, digest.as_bytes())?;
        builder.finish()
    };
    write(&mut builder).map_err(io_err(path))?;
    builder.into_inner().and_then(|mut w| w.flush()).map_err(io_err(path))?;
    Ok(())
}

/// Read every intact entry; a truncated archive yields the entries before the damage.
fn read_entries(path: &Path) -> Result<Vec<(String, Vec<u8>)>, ModelError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut archive = tar::Archive::new(BufReader::new(file));
    let mut out = Vec::new();
    let Ok(entries) = archive.entries() else {
        return Ok(out);
    };
    for entry in entries {
        let Ok(mut entry) = entry else { break };
        let Ok(name) = entry.path().map(|p| p.to_string_lossy().into_owned()) else {
            break;
        };
        let mut data = Vec::new();
        if entry.read_to_end(&mut data).is_err() {
            break;
        }
        out.push((name, data));
    }
    Ok(out)
}

fn decode<F: Real>(bytes: &[u8], dtype: &str) -> Option<Vec<F>> {
    match dtype {
        "f32" => Some(bytes.chunks_exact(4).map(|c| F::c(f32::read_le(c) as f64)).collect()),
        "f64" => Some(bytes.chunks_exact(8).map(|c| F::c(f64::read_le(c))).collect()),
        _ => None,
    }
}

/// Load a checkpoint into precision `F` (values are converted if the stored dtype differs).
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TreeModel<F>, ModelError> {
    let ordered = read_entries(path)?;
    let entries: HashMap<String, Vec<u8>> = ordered.iter().cloned().collect();
    let manifest: Manifest = entries
        .get("manifest.json")
        .ok_or_else(|| corrupt("manifest.json", "missing"))
        .and_then(|b| serde_json::from_slice(b).map_err(|e| corrupt("manifest.json", e.to_string())))?;
    if manifest.format != FORMAT {
        return Err(corrupt(
            "manifest.format",
            format!("unsupported version {}", manifest.format),
        ));
    }
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt("manifest.dtype", format!("unknown dtype {other}"))),
    };
    let topology_json: TopologyJson = entries
        .get("topology.json")
        .ok_or_else(|| corrupt("topology.json", "missing"))
        .and_then(|b| serde_json::from_slice(b).map_err(|e| corrupt("topology.json", e.to_string())))?;
    let topology = TreeTopology::from_json(&topology_json).map_err(|e| corrupt("topology.json", e.to_string()))?;
    let mut model: TreeModel<F> = TreeModel::build(topology, manifest.arch.clone(), 0)?;

    let index: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let fill = |name: String, target: &mut ndarray::Array2<F>| -> Result<(), ModelError> {
        let entry = index
            .get(name.as_str())
            .ok_or_else(|| corrupt(name.clone(), "not listed in the manifest"))?;
        if entry.shape != [target.nrows(), target.ncols()] {
            return Err(corrupt(
                name.clone(),
                format!("shape {:?} does not fit {:?}", entry.shape, target.dim()),
            ));
        }
        let bytes = entries
            .get(&format!("tensors/{name}.bin"))
            .ok_or_else(|| corrupt(name.clone(), "tensor data missing"))?;
        let expected = entry.shape[0] * entry.shape[1] * width;
        if bytes.len() != expected {
            return Err(corrupt(
                name.clone(),
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values: Vec<F> = decode(bytes, &manifest.dtype).expect("dtype checked");
        for (t, v) in target.iter_mut().zip(values) {
            *t = v;
        }
        Ok(())
    };
    for (name, a) in model.named_params_mut() {
        fill(name, a)?;
    }
    for (name, a) in model.named_buffers_mut() {
        fill(name, a)?;
    }
    for name in &manifest.frozen {
        model
            .module_mut(name)
            .ok_or_else(|| corrupt("manifest.frozen", format!("unknown module {name}")))?
            .trainable = false;
    }
    if manifest.tensors.len() != model.named_params().len() + model.named_buffers().len() {
        return Err(corrupt(
            "manifest.tensors",
            "tensor count does not match the architecture",
        ));
    }
    let stored = entries
        .get(CHECKSUM)
        .ok_or_else(|| corrupt(CHECKSUM, "missing; the archive is incomplete"))?;
    let content = ordered
        .iter()
        .filter(|(n, _)| n != CHECKSUM)
        .map(|(n, b)| (n.as_str(), b.as_slice()));
    if stored.as_slice() != digest(content).as_bytes() {
        return Err(corrupt(CHECKSUM, "content does not match the recorded digest"));
    }
    Ok(model)
}
