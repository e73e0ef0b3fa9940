//! Parameter checkpoints: one binary archive of named f32 arrays plus a
//! small JSON manifest (config digest, seed, epoch count).

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SOMNIA01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("array {name} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("checkpoint is missing array {0}")]
    MissingArray(String),
}

/// Provenance carried alongside the arrays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointManifest {
    pub config_digest: String,
    pub seed: u64,
    pub epoch_count: u32,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    manifest: &CheckpointManifest,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| CheckpointError::Io { path: parent.to_path_buf(), source })?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let manifest_json = serde_json::to_vec(manifest)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest serialization: {e}")))?;
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, array) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
        for &d in array.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in array.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

/// Named f64 arrays as stored in an archive.
pub type NamedArrays = Vec<(String, ArrayD<f64>)>;

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointManifest, NamedArrays), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of archive".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let manifest_len = take_u32(&mut pos)? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(take(&mut pos, manifest_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    let count = take_u32(&mut pos)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8".into()))?;
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let array = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("array {name}: {e}")))?;
        arrays.push((name, array));
    }
    Ok((manifest, arrays))
}

/// Copy named arrays into a module's parameters, shape-checked.
pub fn load_into_module(
    module: &mut dyn crate::nn::Module,
    arrays: &[(String, ArrayD<f64>)],
) -> Result<(), CheckpointError> {
    let map: std::collections::HashMap<&str, &ArrayD<f64>> =
        arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let mut error = None;
    module.visit_params("", &mut |name, mut p| {
        if error.is_some() {
            return;
        }
        match map.get(name.as_str()) {
            None => error = Some(CheckpointError::MissingArray(name)),
            Some(src) => {
                if src.shape() != p.value.shape() {
                    error = Some(CheckpointError::ShapeMismatch {
                        name,
                        expected: p.value.shape().to_vec(),
                        actual: src.shape().to_vec(),
                    });
                } else {
                    p.value.assign(src);
                }
            }
        }
    });
    match error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Snapshot a module's parameters as named arrays.
pub fn collect_params(module: &mut dyn crate::nn::Module) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| out.push((name, p.value.to_owned())));
    out
}
