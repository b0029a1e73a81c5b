//! Named parameter set of the two-tower model.
//!
//! Paths have the form `tower/[blockN/]layer/role`, e.g. `image/block0/attn/in_proj_weight`.
//! The temperature lives at [`LOGIT_SCALE`].

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::ParamAccess;
use crate::error::{Error, Result};
use crate::peft::AdapterSet;
use crate::tensor::Tensor;

pub const LOGIT_SCALE: &str = "shared/temperature/logit_scale";
pub const INIT_STD: f64 = 0.02;

pub const IN_PROJ_WEIGHT: &str = "in_proj_weight";
pub const IN_PROJ_BIAS: &str = "in_proj_bias";
pub const OUT_PROJ_WEIGHT: &str = "out_proj_weight";
pub const OUT_PROJ_BIAS: &str = "out_proj_bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Image,
    Text,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Image, Tower::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Text => "text",
        }
    }

    pub fn seq_len(self, c: &ModelConfig) -> usize {
        match self {
            Tower::Image => c.image_seq_len,
            Tower::Text => c.text_seq_len,
        }
    }

    pub fn vocab(self, c: &ModelConfig) -> usize {
        match self {
            Tower::Image => c.image_vocab,
            Tower::Text => c.text_vocab,
        }
    }
}

impl fmt::Display for Tower {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Path builders. Keeping them in one place keeps the schema in one place.
pub mod path {
    use super::Tower;

    pub fn token(t: Tower) -> String {
        format!("{t}/embed/token")
    }
    pub fn position(t: Tower) -> String {
        format!("{t}/embed/position")
    }
    pub fn class_token(t: Tower) -> String {
        format!("{t}/embed/class")
    }
    pub fn block(t: Tower, i: usize, layer: &str, role: &str) -> String {
        format!("{t}/block{i}/{layer}/{role}")
    }
    pub fn attn(t: Tower, i: usize, role: &str) -> String {
        block(t, i, "attn", role)
    }
    pub fn proj(t: Tower) -> String {
        format!("{t}/head/proj")
    }
}

/// Parsed view of a parameter path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPath<'a> {
    pub scope: &'a str,
    pub block: Option<usize>,
    pub layer: &'a str,
    pub role: &'a str,
}

impl<'a> ParamPath<'a> {
    pub fn parse(s: &'a str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || Error::Input(format!("unrecognized parameter path `{s}`"));
        match parts.as_slice() {
            [scope, layer, role] => Ok(Self { scope, block: None, layer, role }),
            [scope, block, layer, role] => {
                let idx = block.strip_prefix("block").and_then(|b| b.parse().ok()).ok_or_else(bad)?;
                Ok(Self { scope, block: Some(idx), layer, role })
            }
            _ => Err(bad()),
        }
    }

    pub fn tower(&self) -> Option<Tower> {
        match self.scope {
            "image" => Some(Tower::Image),
            "text" => Some(Tower::Text),
            _ => None,
        }
    }

    pub fn is_bias(&self) -> bool {
        self.role == "bias" || self.role.ends_with("_bias")
    }
}

/// Shapes of every base parameter, in path order.
pub fn param_shapes(c: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = c.embed_dim;
    let m = c.mlp_dim();
    let mut shapes = BTreeMap::new();
    for t in Tower::BOTH {
        shapes.insert(path::token(t), vec![t.vocab(c), d]);
        shapes.insert(path::position(t), vec![t.seq_len(c), d]);
        shapes.insert(path::class_token(t), vec![1, d]);
        for i in 0..c.blocks_per_tower {
            shapes.insert(path::attn(t, i, IN_PROJ_WEIGHT), vec![3 * d, d]);
            shapes.insert(path::attn(t, i, IN_PROJ_BIAS), vec![3 * d]);
            shapes.insert(path::attn(t, i, OUT_PROJ_WEIGHT), vec![d, d]);
            shapes.insert(path::attn(t, i, OUT_PROJ_BIAS), vec![d]);
            for ln in ["ln1", "ln2"] {
                shapes.insert(path::block(t, i, ln, "gain"), vec![d]);
                shapes.insert(path::block(t, i, ln, "bias"), vec![d]);
            }
            shapes.insert(path::block(t, i, "mlp", "fc1_weight"), vec![m, d]);
            shapes.insert(path::block(t, i, "mlp", "fc1_bias"), vec![m]);
            shapes.insert(path::block(t, i, "mlp", "fc2_weight"), vec![d, m]);
            shapes.insert(path::block(t, i, "mlp", "fc2_bias"), vec![d]);
        }
        shapes.insert(path::proj(t), vec![d, d]);
    }
    shapes.insert(LOGIT_SCALE.to_string(), vec![1]);
    shapes
}

/// Closed-form count of base parameters.
pub fn param_count(c: &ModelConfig) -> usize {
    let d = c.embed_dim;
    let m = c.mlp_dim();
    let per_block = 3 * d * d + 3 * d + d * d + d + 4 * d + m * d + m + d * m + d;
    let tower = |vocab: usize, seq: usize| vocab * d + seq * d + d + c.blocks_per_tower * per_block + d * d;
    tower(c.image_vocab, c.image_seq_len) + tower(c.text_vocab, c.text_seq_len) + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    config: ModelConfig,
    base: BTreeMap<String, Tensor>,
    adapters: Option<AdapterSet>,
}

impl DualEncoderParams {
    /// Weights from a normal(0, 0.02) truncated at two standard deviations; biases zero,
    /// layer-norm gains one, temperature at `logit_scale_init`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut base = BTreeMap::new();
        for (name, shape) in param_shapes(config) {
            let p = ParamPath::parse(&name)?;
            let n: usize = shape.iter().product();
            let data = if name == LOGIT_SCALE {
                vec![config.logit_scale_init]
            } else if p.role == "gain" {
                vec![1.0; n]
            } else if p.is_bias() {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v;
                        }
                    })
                    .collect()
            };
            base.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            base,
            adapters: None,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        base: BTreeMap<String, Tensor>,
        adapters: Option<AdapterSet>,
    ) -> Result<Self> {
        let expected = param_shapes(&config);
        if expected.len() != base.len() {
            return Err(Error::Format(format!(
                "expected {} base parameters for this configuration, found {}",
                expected.len(),
                base.len()
            )));
        }
        for (name, shape) in &expected {
            match base.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            base,
            adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &BTreeMap<String, Tensor> {
        &self.base
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.base
            .get(name)
            .or_else(|| self.adapters.as_ref().and_then(|a| a.tensors().get(name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(t) = self.base.get_mut(name) {
            return Some(t);
        }
        self.adapters.as_mut().and_then(|a| a.tensors_mut().get_mut(name))
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    pub(crate) fn set_adapters(&mut self, adapters: Option<AdapterSet>) {
        self.adapters = adapters;
    }

    pub(crate) fn base_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.base
    }

    /// Every parameter path, base and adapter, sorted.
    pub fn paths(&self) -> Vec<String> {
        let mut names: Vec<String> = self.base.keys().cloned().collect();
        if let Some(a) = &self.adapters {
            names.extend(a.tensors().keys().cloned());
        }
        names.sort();
        names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.base
            .iter()
            .chain(self.adapters.iter().flat_map(|a| a.tensors().iter()))
    }

    pub fn total_count(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn logit_scale(&self) -> f64 {
        self.base[LOGIT_SCALE].data()[0]
    }

    pub(crate) fn clamp_logit_scale(&mut self) {
        let v = &mut self.base.get_mut(LOGIT_SCALE).unwrap().data_mut()[0];
        if *v > super::config::LOGIT_SCALE_MAX {
            *v = super::config::LOGIT_SCALE_MAX;
        }
    }

    /// Paths whose tensors differ bitwise from `other`. Paths present on only one side
    /// count as changed.
    pub fn changed_paths(&self, other: &DualEncoderParams) -> Vec<String> {
        let mut all = self.paths();
        all.extend(other.paths());
        all.sort();
        all.dedup();
        all.into_iter()
            .filter(|p| match (self.get(p), other.get(p)) {
                (Some(a), Some(b)) => !a.bit_eq(b),
                _ => true,
            })
            .collect()
    }
}

impl ParamAccess for DualEncoderParams {
    fn param_names(&self) -> Vec<String> {
        self.paths()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}
