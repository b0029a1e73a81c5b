use std::collections::BTreeMap;

use serde::Serialize;

use super::adapters::adapter_shapes;
use super::strategy::Strategy;
use crate::error::Result;
use crate::model::{param_shapes, ModelConfig, ParamPath, IN_PROJ_WEIGHT};

/// Per-path trainable flag, covering base and adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMask {
    entries: BTreeMap<String, (bool, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskReport {
    pub strategy: String,
    pub trainable_count: usize,
    pub total_count: usize,
    pub fraction: f64,
}

impl TrainableMask {
    /// Builds a mask from explicit `(path, trainable, numel)` entries.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, bool, usize)>) -> Self {
        Self {
            entries: entries.into_iter().map(|(p, t, n)| (p, (t, n))).collect(),
        }
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.entries.get(path).is_some_and(|(t, _)| *t)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, (t, _))| *t)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|(t, _)| *t).map(|(_, n)| n).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|(_, n)| n).sum()
    }

    pub fn report(&self, strategy: &Strategy) -> MaskReport {
        let trainable_count = self.trainable_count();
        let total_count = self.total_count();
        MaskReport {
            strategy: strategy.kind().label().to_string(),
            trainable_count,
            total_count,
            fraction: trainable_count as f64 / total_count as f64,
        }
    }
}

/// Which parameters a strategy trains. Deterministic in `(strategy, config)`.
pub fn build_mask(strategy: &Strategy, config: &ModelConfig) -> Result<TrainableMask> {
    let base = param_shapes(config);
    let adapters = adapter_shapes(strategy, config)?;
    let mut entries = BTreeMap::new();
    for (name, shape) in &base {
        let p = ParamPath::parse(name)?;
        let trainable = match strategy {
            Strategy::ZeroShot | Strategy::Lora { .. } | Strategy::Adapter { .. } => false,
            Strategy::Full => true,
            Strategy::AClip { max_block } => {
                p.role == IN_PROJ_WEIGHT
                    && p.tower().is_some()
                    && match (max_block, p.block) {
                        (Some(limit), Some(b)) => b < *limit,
                        (None, Some(_)) => true,
                        (_, None) => false,
                    }
            }
            Strategy::BitFit => p.is_bias(),
        };
        entries.insert(name.clone(), (trainable, shape.iter().product()));
    }
    for (name, shape) in adapters {
        entries.insert(name, (true, shape.iter().product()));
    }
    Ok(TrainableMask { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_count;
    use crate::peft::strategy::StrategyKind;

    fn mask(kind: StrategyKind) -> TrainableMask {
        build_mask(&Strategy::default_for(kind), &ModelConfig::default()).unwrap()
    }

    #[test]
    fn zero_shot_trains_nothing() {
        assert_eq!(mask(StrategyKind::ZeroShot).trainable_count(), 0);
    }

    #[test]
    fn full_trains_everything() {
        let m = mask(StrategyKind::Full);
        assert_eq!(m.trainable_count(), param_count(&ModelConfig::default()));
        assert_eq!(m.trainable_count(), m.total_count());
    }

    #[test]
    fn aclip_count() {
        // 2 towers x 2 blocks x 3*32*32
        assert_eq!(mask(StrategyKind::AClip).trainable_count(), 12288);
        let limited = build_mask(&Strategy::AClip { max_block: Some(1) }, &ModelConfig::default()).unwrap();
        assert_eq!(limited.trainable_count(), 6144);
        assert!(limited.is_trainable("image/block0/attn/in_proj_weight"));
        assert!(!limited.is_trainable("image/block1/attn/in_proj_weight"));
        assert!(!limited.is_trainable("image/block0/attn/in_proj_bias"));
    }

    #[test]
    fn bitfit_count_is_sum_of_bias_dims() {
        let c = ModelConfig::default();
        let (d, m, l) = (c.embed_dim, c.mlp_dim(), c.blocks_per_tower);
        // per block: in_proj 3d, out_proj d, two layer norms d each, fc1 m, fc2 d
        let per_block = 3 * d + d + 2 * d + m + d;
        assert_eq!(mask(StrategyKind::BitFit).trainable_count(), 2 * l * per_block);
    }

    #[test]
    fn adapter_strategies_train_only_adapters() {
        let lora = mask(StrategyKind::Lora);
        assert_eq!(lora.trainable_count(), 3072);
        assert!(lora.trainable_paths().iter().all(|p| p.contains("_lora_")));
        let adapter = mask(StrategyKind::Adapter);
        // down 8x32 + 8, up 32x8 + 32
        assert_eq!(adapter.trainable_count(), 256 + 8 + 256 + 32);
        assert!(adapter.trainable_paths().iter().all(|p| p.starts_with("image/adapter/")));
    }

    #[test]
    fn report_fraction() {
        let m = mask(StrategyKind::AClip);
        let r = m.report(&Strategy::AClip { max_block: None });
        assert_eq!(r.strategy, "A-CLIP");
        assert_eq!(r.trainable_count, 12288);
        assert!((r.fraction - 12288.0 / r.total_count as f64).abs() < 1e-15);
    }
}
