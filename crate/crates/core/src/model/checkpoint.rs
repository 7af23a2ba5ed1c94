//! Flat little-endian tensor archive (`params.bin`) plus a JSON manifest
//! (`manifest.json`) describing config, seed and tensor layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{init_params, ModelConfig, ModelError, ModelParams};
use crate::numerics::{Scalar, Tensor};

const FORMAT: &str = "scformer-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARCHIVE_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest field `{field}` is {stored} but the live config has {live}")]
    Mismatch {
        field: String,
        stored: String,
        live: String,
    },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the archive.
    pub offset: usize,
    /// Number of scalars.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: usize,
    /// Free-form state owned by the caller, e.g. optimizer step counters.
    #[serde(default)]
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ModelParams<Tensor<T>>,
    /// Additional named tensors stored after the parameters.
    pub extra: Vec<(String, Tensor<T>)>,
    pub meta: Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    ckpt: &Checkpoint<T>,
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, t: &Tensor<T>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
            len: t.len(),
        });
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    };
    ckpt.params.map(&mut |s, t| push(&s.name, t));
    for (name, t) in &ckpt.extra {
        push(name, t);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        precision: T::NAME.into(),
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        tensors,
        total_bytes: bytes.len(),
        meta: ckpt.meta.clone(),
    };
    let archive = dir.join(ARCHIVE_FILE);
    fs::write(&archive, &bytes).map_err(io_err(&archive))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads a checkpoint, checking it against `live` field by field when given.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    live: Option<&ModelConfig>,
) -> Result<Checkpoint<T>, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.precision != T::NAME {
        return Err(CheckpointError::Mismatch {
            field: "precision".into(),
            stored: manifest.precision.clone(),
            live: T::NAME.into(),
        });
    }
    if let Some(live) = live {
        compare_configs(&manifest.config, live)?;
    }
    let archive = dir.join(ARCHIVE_FILE);
    let bytes = fs::read(&archive).map_err(io_err(&archive))?;
    if bytes.len() != manifest.total_bytes {
        return Err(CheckpointError::Corrupt(format!(
            "archive holds {} bytes, manifest declares {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if n != e.len || e.offset != expected_offset {
            return Err(CheckpointError::Corrupt(format!(
                "entry {} has inconsistent layout",
                e.name
            )));
        }
        let end = e.offset + e.len * T::BYTES;
        let data = bytes
            .get(e.offset..end)
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!("entry {} runs past the archive", e.name))
            })?
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        tensors.push((
            e.name.clone(),
            Tensor::new(&e.shape, data).map_err(ModelError::from)?,
        ));
        expected_offset = end;
    }

    let template = init_params::<T>(&manifest.config, 0)?;
    let slots = template.slots();
    if tensors.len() < slots.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} tensors for {} parameter slots",
            tensors.len(),
            slots.len()
        )));
    }
    let extra = tensors.split_off(slots.len());
    for (slot, (name, _)) in slots.iter().zip(&tensors) {
        if &slot.name != name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor {}, found {name}",
                slot.name
            )));
        }
    }
    let params =
        ModelParams::from_leaves(&template, tensors.into_iter().map(|(_, t)| t).collect())?;
    Ok(Checkpoint {
        config: manifest.config,
        seed: manifest.seed,
        params,
        extra,
        meta: manifest.meta,
    })
}

fn compare_configs(stored: &ModelConfig, live: &ModelConfig) -> Result<(), CheckpointError> {
    let (Value::Object(a), Value::Object(b)) =
        (serde_json::to_value(stored)?, serde_json::to_value(live)?)
    else {
        unreachable!("configs serialize to objects");
    };
    for (field, sv) in &a {
        let lv = b.get(field).cloned().unwrap_or(Value::Null);
        if *sv != lv {
            return Err(CheckpointError::Mismatch {
                field: field.clone(),
                stored: sv.to_string(),
                live: lv.to_string(),
            });
        }
    }
    Ok(())
}
