//! Injected adapter parameters: LoRA factors on chosen weight matrices, or a bottleneck
//! head blended into the projected embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::{build_mask, TrainableMask};
use super::strategy::Strategy;
use crate::autodiff::kernels::gemm_nn;
use crate::error::{Error, Result};
use crate::model::{param_shapes, DualEncoderParams, ModelConfig, ParamPath, Tower};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterKind {
    /// `W_eff = W + B·A` for every base path in `targets`.
    Lora { rank: usize, targets: Vec<String> },
    /// `e' = blend·up(relu(down(e))) + (1 − blend)·e` on the projected embedding of each tower,
    /// before it is normalized.
    Bottleneck {
        reduction: usize,
        blend: f64,
        towers: Vec<Tower>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    tensors: BTreeMap<String, Tensor>,
}

fn lora_stem(target: &str) -> &str {
    target.strip_suffix("_weight").unwrap_or(target)
}

pub fn lora_a_path(target: &str) -> String {
    format!("{}_lora_a", lora_stem(target))
}

pub fn lora_b_path(target: &str) -> String {
    format!("{}_lora_b", lora_stem(target))
}

pub fn bottleneck_path(tower: Tower, role: &str) -> String {
    format!("{tower}/adapter/{role}")
}

/// Checkpoint entry carrying the blend ratio of a bottleneck adapter.
pub fn blend_entry(tower: Tower) -> String {
    bottleneck_path(tower, "blend")
}

/// Base paths matched by `layer/role` target suffixes.
pub fn resolve_lora_targets(config: &ModelConfig, targets: &[String]) -> Result<Vec<String>> {
    let shapes = param_shapes(config);
    let mut out = Vec::new();
    for t in targets {
        let matched: Vec<&String> = shapes
            .iter()
            .filter(|(name, shape)| {
                shape.len() == 2 && {
                    let p = ParamPath::parse(name).expect("schema paths parse");
                    format!("{}/{}", p.layer, p.role) == *t
                }
            })
            .map(|(name, _)| name)
            .collect();
        if matched.is_empty() {
            return Err(Error::Config(format!(
                "LoRA target `{t}` matches no weight matrix (expected e.g. attn/in_proj_weight)"
            )));
        }
        out.extend(matched.into_iter().cloned());
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Shapes of the adapter tensors a strategy injects; empty for strategies without adapters.
pub fn adapter_shapes(strategy: &Strategy, config: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    let d = config.embed_dim;
    let mut shapes = BTreeMap::new();
    match strategy {
        Strategy::Lora { rank, targets } => {
            if *rank == 0 || *rank >= d {
                return Err(Error::Config(format!(
                    "LoRA rank {rank} must satisfy 0 < rank < embed_dim ({d})"
                )));
            }
            let base = param_shapes(config);
            for target in resolve_lora_targets(config, targets)? {
                let s = &base[&target];
                shapes.insert(lora_a_path(&target), vec![*rank, s[1]]);
                shapes.insert(lora_b_path(&target), vec![s[0], *rank]);
            }
        }
        Strategy::Adapter { reduction, blend, towers } => {
            if *reduction == 0 || d % reduction != 0 {
                return Err(Error::Config(format!(
                    "adapter reduction {reduction} must divide embed_dim ({d})"
                )));
            }
            if !(0.0..=1.0).contains(blend) {
                return Err(Error::Config(format!("adapter blend {blend} is outside [0, 1]")));
            }
            let h = d / reduction;
            for &t in towers {
                shapes.insert(bottleneck_path(t, "down_weight"), vec![h, d]);
                shapes.insert(bottleneck_path(t, "down_bias"), vec![h]);
                shapes.insert(bottleneck_path(t, "up_weight"), vec![d, h]);
                shapes.insert(bottleneck_path(t, "up_bias"), vec![d]);
            }
        }
        _ => {}
    }
    Ok(shapes)
}

impl AdapterSet {
    pub(crate) fn from_parts(kind: AdapterKind, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { kind, tensors }
    }

    pub fn kind(&self) -> &AdapterKind {
        &self.kind
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// `(A, B)` factor paths when `target` carries a LoRA update.
    pub fn lora_for(&self, target: &str) -> Option<(String, String)> {
        match &self.kind {
            AdapterKind::Lora { targets, .. } if targets.iter().any(|t| t == target) => {
                Some((lora_a_path(target), lora_b_path(target)))
            }
            _ => None,
        }
    }

    /// Blend ratio when `tower` carries a bottleneck head.
    pub fn bottleneck_for(&self, tower: Tower) -> Option<f64> {
        match &self.kind {
            AdapterKind::Bottleneck { blend, towers, .. } if towers.contains(&tower) => Some(*blend),
            _ => None,
        }
    }
}

/// Attaches the adapters of a LoRA or Adapter strategy and returns the model with its mask.
///
/// LoRA `A` is uniform in ±1/√fan_in and `B` is zero; the bottleneck `down` is uniform in
/// ±1/√d and `up` is zero. Both make the injected model reproduce the base model at step 0.
pub fn inject(
    strategy: &Strategy,
    params: &DualEncoderParams,
    seed: u64,
) -> Result<(DualEncoderParams, TrainableMask)> {
    if params.adapters().is_some() {
        return Err(Error::Usage("model already carries adapters".into()));
    }
    let config = params.config();
    let shapes = adapter_shapes(strategy, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    let kind = match strategy {
        Strategy::Lora { rank, targets } => {
            for (name, shape) in &shapes {
                let data = if name.ends_with("_lora_a") {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; shape.iter().product()]
                };
                tensors.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            AdapterKind::Lora {
                rank: *rank,
                targets: resolve_lora_targets(config, targets)?,
            }
        }
        Strategy::Adapter { reduction, blend, towers } => {
            for (name, shape) in &shapes {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("down_weight") {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                tensors.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            let mut towers = towers.clone();
            towers.sort();
            towers.dedup();
            AdapterKind::Bottleneck {
                reduction: *reduction,
                blend: *blend,
                towers,
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "{} does not inject adapters",
                other.kind().label()
            )))
        }
    };
    let mut out = params.clone();
    out.set_adapters(Some(AdapterSet { kind, tensors }));
    let mask = build_mask(strategy, config)?;
    Ok((out, mask))
}

/// `B·A` for one LoRA target, computed exactly as the forward pass does.
pub(crate) fn lora_delta(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, rank) = (b.shape()[0], b.shape()[1]);
    let inp = a.shape()[1];
    let mut delta = vec![0.0; out * inp];
    gemm_nn(b.data(), a.data(), &mut delta, out, rank, inp);
    delta
}

/// Folds LoRA factors into their base weights (`W ← W + B·A`) and drops the adapters.
pub fn merge_lora(params: &DualEncoderParams) -> Result<DualEncoderParams> {
    let Some(adapters) = params.adapters() else {
        return Err(Error::Usage("merge_lora called on a model without LoRA adapters".into()));
    };
    let AdapterKind::Lora { targets, .. } = adapters.kind() else {
        return Err(Error::Usage("merge_lora needs LoRA adapters, found a bottleneck adapter".into()));
    };
    let mut merged = params.clone();
    for target in targets {
        let a = &adapters.tensors()[&lora_a_path(target)];
        let b = &adapters.tensors()[&lora_b_path(target)];
        let delta = lora_delta(a, b);
        let w = merged.base_mut().get_mut(target).expect("targets resolve to base paths");
        for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
            *wv += dv;
        }
    }
    merged.set_adapters(None);
    Ok(merged)
}
