//! `DSET` dataset files.
//!
//! Layout: magic, `u16` version, `u32` header length, JSON header holding the task spec
//! and transform history, then for each of train, val and test the image tokens,
//! caption tokens and labels. Every array is a `u32` element count followed by
//! little-endian `u16` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Split, TaskSpec, Transform, CAPTION_LEN, IMAGE_PATCHES};
use crate::error::{Error, Result};
use crate::model::TokenMatrix;

pub const DSET_MAGIC: &[u8; 4] = b"DSET";
pub const DSET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: TaskSpec,
    transforms: Vec<Transform>,
}

fn push_array(out: &mut Vec<u8>, values: &[usize]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: ds.spec.clone(),
        transforms: ds.transforms.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DSET_MAGIC);
    out.extend_from_slice(&DSET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for split in [&ds.train, &ds.val, &ds.test] {
        push_array(&mut out, split.images.ids());
        push_array(&mut out, split.captions.ids());
        push_array(&mut out, &split.labels);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("dataset file truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn array(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        let raw = self.take(n.checked_mul(2).unwrap_or(usize::MAX), what)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect())
    }
}

fn read_split(r: &mut Reader<'_>, name: &str) -> Result<Split> {
    let images = r.array(&format!("{name} images"))?;
    let captions = r.array(&format!("{name} captions"))?;
    let labels = r.array(&format!("{name} labels"))?;
    let n = labels.len();
    if images.len() != n * IMAGE_PATCHES || captions.len() != n * CAPTION_LEN {
        return Err(Error::Format(format!(
            "{name} split has {} image and {} caption tokens for {n} labels",
            images.len(),
            captions.len()
        )));
    }
    Split::new(
        TokenMatrix::new(n, IMAGE_PATCHES, images)?,
        TokenMatrix::new(n, CAPTION_LEN, captions)?,
        labels,
    )
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(DSET_MAGIC.as_slice()) {
        return Err(Error::Format("not a DSET dataset file".into()));
    }
    let raw = r.take(2, "version")?;
    let version = u16::from_le_bytes([raw[0], raw[1]]);
    if version != DSET_VERSION {
        if u16::from_be_bytes([raw[0], raw[1]]) == DSET_VERSION {
            return Err(Error::Format(
                "dataset file is big-endian; only little-endian DSET is supported".into(),
            ));
        }
        return Err(Error::Format(format!("unsupported DSET version {version}")));
    }
    let len = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    let train = read_split(&mut r, "train")?;
    let val = read_split(&mut r, "val")?;
    let test = read_split(&mut r, "test")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after dataset", bytes.len() - r.pos)));
    }
    let classes = header.spec.classes;
    if [&train, &val, &test].iter().any(|s| s.labels.iter().any(|&l| l >= classes)) {
        return Err(Error::Format(format!("label out of range for {classes} classes")));
    }
    Ok(Dataset {
        spec: header.spec,
        transforms: header.transforms,
        train,
        val,
        test,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}
