//! `EMB1` embedding files.
//!
//! Layout: magic, `u32` count, `u32` dim, `u8` modality (0 image, 1 text), count·dim
//! little-endian `f64`, then count `u32` class ids. An optional `<file>.json` sidecar
//! carries the source tag and class names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER: usize = 4 + 4 + 4 + 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn expected_len(count: usize, dim: usize) -> Option<usize> {
    count.checked_mul(dim)?.checked_mul(8)?.checked_add(count.checked_mul(4)?)?.checked_add(HEADER)
}

pub fn to_bytes(set: &EmbeddingSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(expected_len(set.len(), set.dim()).unwrap_or(0));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.push(set.modality().code());
    for v in set.vectors().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in set.class_ids() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER || &bytes[..4] != EMB_MAGIC {
        return Err(Error::Format("not an EMB1 embedding file".into()));
    }
    let word = |at: usize| -> [u8; 4] { bytes[at..at + 4].try_into().unwrap() };
    let count = u32::from_le_bytes(word(4)) as usize;
    let dim = u32::from_le_bytes(word(8)) as usize;
    if expected_len(count, dim) != Some(bytes.len()) {
        let be_count = u32::from_be_bytes(word(4)) as usize;
        let be_dim = u32::from_be_bytes(word(8)) as usize;
        if expected_len(be_count, be_dim) == Some(bytes.len()) {
            return Err(Error::Format(
                "embedding file is big-endian; only little-endian EMB1 is supported".into(),
            ));
        }
        return Err(Error::Format(format!(
            "embedding file has {} bytes, header ({count} x {dim}) implies {:?}",
            bytes.len(),
            expected_len(count, dim)
        )));
    }
    let modality = Modality::from_code(bytes[12])?;
    let mut pos = HEADER;
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count * dim {
        data.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
        pos += 8;
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(u32::from_le_bytes(word(pos)));
        pos += 4;
    }
    EmbeddingSet::new(Tensor::new(vec![count, dim], data)?, modality, ids)
}

/// Writes the set, plus a sidecar when a source tag or class names are present.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path, class_names: &[String]) -> Result<()> {
    std::fs::write(path, to_bytes(set)).map_err(|e| Error::io(path, e))?;
    if set.source().is_some() || !class_names.is_empty() {
        let sidecar = EmbeddingSidecar {
            source: set.source().map(str::to_string),
            class_names: class_names.to_vec(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads the set and its sidecar, if one exists.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingSet, Option<EmbeddingSidecar>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut set = from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let sidecar = match std::fs::read(&side) {
        Ok(b) => Some(serde_json::from_slice::<EmbeddingSidecar>(&b)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&side, e)),
    };
    if let Some(src) = sidecar.as_ref().and_then(|s| s.source.clone()) {
        set = set.with_source(src);
    }
    Ok((set, sidecar))
}
