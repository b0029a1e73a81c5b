//! `DEP1` parameter files: magic, `u32` entry count, then per entry a `u32`-prefixed
//! UTF-8 path, `u32` rank, `u32` dims and little-endian `f64` payload. Entries are
//! sorted by path, so equal parameter sets serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{DualEncoderParams, Tower};
use crate::error::{Error, Result};
use crate::peft::{blend_entry, bottleneck_path, AdapterKind, AdapterSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DEP1";

pub fn to_bytes(params: &DualEncoderParams) -> Vec<u8> {
    let mut entries: BTreeMap<String, Tensor> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if let Some(AdapterKind::Bottleneck { blend, towers, .. }) = params.adapters().map(AdapterSet::kind) {
        for &t in towers {
            entries.insert(blend_entry(t), Tensor::from_vec(vec![*blend]));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<DualEncoderParams> {
    config.validate()?;
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a DEP1 checkpoint (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > (bytes.len() - r.pos) / 8 {
            return Err(Error::Format(format!("payload of {name} runs past the end of the file")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last entry", bytes.len() - r.pos)));
    }
    split_adapters(entries, config)
}

fn split_adapters(mut entries: BTreeMap<String, Tensor>, config: &ModelConfig) -> Result<DualEncoderParams> {
    let adapter_names: Vec<String> = entries
        .keys()
        .filter(|k| k.contains("_lora_") || k.contains("/adapter/"))
        .cloned()
        .collect();
    if adapter_names.is_empty() {
        return DualEncoderParams::from_parts(config.clone(), entries, None);
    }
    let mut tensors = BTreeMap::new();
    for name in &adapter_names {
        tensors.insert(name.clone(), entries.remove(name).unwrap());
    }
    let lora_targets: Vec<String> = adapter_names
        .iter()
        .filter_map(|n| n.strip_suffix("_lora_a").map(|stem| format!("{stem}_weight")))
        .collect();
    let kind = if !lora_targets.is_empty() {
        let rank = tensors[&format!("{}_lora_a", lora_targets[0].trim_end_matches("_weight"))].shape()[0];
        AdapterKind::Lora { rank, targets: lora_targets }
    } else {
        let mut towers = Vec::new();
        let mut blend = None;
        for t in Tower::BOTH {
            if let Some(b) = tensors.remove(&blend_entry(t)) {
                towers.push(t);
                blend = Some(b.data()[0]);
            }
        }
        let blend = blend.ok_or_else(|| Error::Format("bottleneck adapter without a blend entry".into()))?;
        let down = tensors
            .get(&bottleneck_path(towers[0], "down_weight"))
            .ok_or_else(|| Error::Format("bottleneck adapter without a down projection".into()))?;
        AdapterKind::Bottleneck {
            reduction: config.embed_dim / down.shape()[0],
            blend,
            towers,
        }
    };
    let adapters = AdapterSet::from_parts(kind, tensors);
    validate_adapters(&adapters, config)?;
    DualEncoderParams::from_parts(config.clone(), entries, Some(adapters))
}

fn validate_adapters(adapters: &AdapterSet, config: &ModelConfig) -> Result<()> {
    let strategy = match adapters.kind() {
        AdapterKind::Lora { rank, targets } => {
            let mut suffixes: Vec<String> = targets
                .iter()
                .map(|t| {
                    let parts: Vec<&str> = t.rsplitn(3, '/').collect();
                    format!("{}/{}", parts[1], parts[0])
                })
                .collect();
            suffixes.sort();
            suffixes.dedup();
            crate::peft::Strategy::Lora { rank: *rank, targets: suffixes }
        }
        AdapterKind::Bottleneck { reduction, blend, towers } => crate::peft::Strategy::Adapter {
            reduction: *reduction,
            blend: *blend,
            towers: towers.clone(),
        },
    };
    let expected = crate::peft::adapter_shapes(&strategy, config)?;
    let actual: BTreeMap<&String, &[usize]> = adapters.tensors().iter().map(|(k, t)| (k, t.shape())).collect();
    if expected.len() != actual.len() || expected.iter().any(|(k, s)| actual.get(k) != Some(&s.as_slice())) {
        return Err(Error::Format("adapter entries do not form a complete adapter set".into()));
    }
    Ok(())
}

pub fn save(params: &DualEncoderParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<DualEncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, config)
}
