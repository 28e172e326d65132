//! Checkpoint directories: named tensors plus a plain-text manifest.
//!
//! Layout: one CFT1 file per tensor and a `manifest.txt` with lines
//! `tensor <name> <file> <dims>` and `meta <key> <value>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub struct Checkpoint {
    pub tensors: BTreeMap<String, Arc<Tensor>>,
    pub meta: BTreeMap<String, String>,
}

fn dims_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Writes tensors and metadata into `dir`.
pub fn save(
    dir: &Path,
    tensors: &[(&str, &Tensor)],
    meta: &[(&str, String)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        let file = format!("{name}.cft");
        io::write_tensor(&dir.join(&file), t)?;
        manifest.push_str(&format!("tensor {name} {file} {}\n", dims_string(t.shape())));
    }
    for (key, value) in meta {
        manifest.push_str(&format!("meta {key} {value}\n"));
    }
    io::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint directory, verifying manifest shapes and that every
/// tensor is finite.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Corrupt(format!("reading {}: {e}", path.display())))?;
    let mut tensors = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(2, ' ').collect();
        match fields.as_slice() {
            ["tensor", rest] => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, file, dims] = parts.as_slice() else {
                    return Err(Error::Corrupt(format!("bad manifest line {line:?}")));
                };
                let t = io::read_tensor(&dir.join(file))?;
                if dims_string(t.shape()) != *dims {
                    return Err(Error::Corrupt(format!(
                        "tensor {name}: manifest says {dims}, file has {}",
                        dims_string(t.shape())
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::Corrupt(format!("tensor {name} has non-finite values")));
                }
                tensors.insert(name.to_string(), Arc::new(t));
            }
            ["meta", rest] => {
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(key.to_string(), value.to_string());
            }
            _ => return Err(Error::Corrupt(format!("bad manifest line {line:?}"))),
        }
    }
    Ok(Checkpoint { tensors, meta })
}

impl Checkpoint {
    /// Takes a named tensor, verifying its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Arc<Tensor>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::Corrupt(format!(
                "tensor {name:?}: expected shape {shape:?}, got {:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint missing meta {key:?}")))
    }
}
