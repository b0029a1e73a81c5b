use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tower;

/// Learning rates per fine-tuning method.
pub const LR_FULL: f64 = 2e-5;
pub const LR_ADAPTER: f64 = 6e-3;
pub const LR_LORA: f64 = 1e-5;
pub const LR_BITFIT: f64 = 1e-3;
pub const LR_ACLIP: f64 = 1e-5;

pub const DEFAULT_LORA_RANK: usize = 4;
pub const DEFAULT_ADAPTER_REDUCTION: usize = 4;
pub const DEFAULT_ADAPTER_BLEND: f64 = 0.2;

/// `layer/role` suffixes that LoRA attaches to in every block of both towers.
pub fn default_lora_targets() -> Vec<String> {
    vec!["attn/in_proj_weight".into(), "attn/out_proj_weight".into()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    ZeroShot,
    Full,
    AClip,
    BitFit,
    Lora,
    Adapter,
}

impl StrategyKind {
    pub const FINE_TUNED: [StrategyKind; 5] = [
        StrategyKind::Adapter,
        StrategyKind::AClip,
        StrategyKind::BitFit,
        StrategyKind::Full,
        StrategyKind::Lora,
    ];

    /// Column label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "ZS",
            StrategyKind::Full => "Full",
            StrategyKind::AClip => "A-CLIP",
            StrategyKind::BitFit => "BitFit",
            StrategyKind::Lora => "LoRA",
            StrategyKind::Adapter => "CLIP-Adapter",
        }
    }

    /// Spelling used in config files.
    pub fn config_name(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "ZeroShot",
            StrategyKind::Full => "Full",
            StrategyKind::AClip => "ACLIP",
            StrategyKind::BitFit => "BitFit",
            StrategyKind::Lora => "LoRA",
            StrategyKind::Adapter => "Adapter",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            StrategyKind::ZeroShot => 0.0,
            StrategyKind::Full => LR_FULL,
            StrategyKind::AClip => LR_ACLIP,
            StrategyKind::BitFit => LR_BITFIT,
            StrategyKind::Lora => LR_LORA,
            StrategyKind::Adapter => LR_ADAPTER,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "zs" | "zeroshot" => StrategyKind::ZeroShot,
            "full" => StrategyKind::Full,
            "aclip" => StrategyKind::AClip,
            "bitfit" => StrategyKind::BitFit,
            "lora" => StrategyKind::Lora,
            "adapter" | "clipadapter" => StrategyKind::Adapter,
            _ => {
                return Err(Error::Config(format!(
                    "unknown strategy kind `{s}` (expected one of ZeroShot, Full, ACLIP, BitFit, LoRA, Adapter)"
                )))
            }
        })
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A fine-tuning method with its method-specific settings.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    ZeroShot,
    Full,
    /// Attention in-projection weights only; `max_block` limits training to blocks below it.
    AClip { max_block: Option<usize> },
    BitFit,
    Lora { rank: usize, targets: Vec<String> },
    Adapter { reduction: usize, blend: f64, towers: Vec<Tower> },
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::ZeroShot => StrategyKind::ZeroShot,
            Strategy::Full => StrategyKind::Full,
            Strategy::AClip { .. } => StrategyKind::AClip,
            Strategy::BitFit => StrategyKind::BitFit,
            Strategy::Lora { .. } => StrategyKind::Lora,
            Strategy::Adapter { .. } => StrategyKind::Adapter,
        }
    }

    /// The strategy with its default settings.
    pub fn default_for(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::ZeroShot => Strategy::ZeroShot,
            StrategyKind::Full => Strategy::Full,
            StrategyKind::AClip => Strategy::AClip { max_block: None },
            StrategyKind::BitFit => Strategy::BitFit,
            StrategyKind::Lora => Strategy::Lora {
                rank: DEFAULT_LORA_RANK,
                targets: default_lora_targets(),
            },
            StrategyKind::Adapter => Strategy::Adapter {
                reduction: DEFAULT_ADAPTER_REDUCTION,
                blend: DEFAULT_ADAPTER_BLEND,
                towers: vec![Tower::Image],
            },
        }
    }

    pub fn injects_adapters(&self) -> bool {
        matches!(self, Strategy::Lora { .. } | Strategy::Adapter { .. })
    }

    pub fn to_block(&self) -> StrategyBlock {
        let mut b = StrategyBlock {
            kind: self.kind().config_name().to_string(),
            ..Default::default()
        };
        match self {
            Strategy::AClip { max_block } => b.aclip_max_block = *max_block,
            Strategy::Lora { rank, targets } => {
                b.lora_rank = Some(*rank);
                b.lora_targets = Some(targets.clone());
            }
            Strategy::Adapter { reduction, blend, towers } => {
                b.adapter_reduction = Some(*reduction);
                b.adapter_blend = Some(*blend);
                b.adapter_towers = Some(towers.clone());
            }
            _ => {}
        }
        b
    }
}

/// Strategy as written in a config file. Method-specific keys are only accepted for
/// their own method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyBlock {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_targets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_reduction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_blend: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_towers: Option<Vec<Tower>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aclip_max_block: Option<usize>,
}

impl StrategyBlock {
    pub fn of(kind: StrategyKind) -> Self {
        Strategy::default_for(kind).to_block()
    }

    /// Resolves the block into a [`Strategy`], collecting every rule violation.
    pub fn resolve(&self) -> std::result::Result<Strategy, Vec<String>> {
        let kind = match StrategyKind::parse(&self.kind) {
            Ok(k) => k,
            Err(e) => return Err(vec![format!("strategy.kind: {e}")]),
        };
        let mut errors = Vec::new();
        let mut forbid = |key: &str, present: bool, owner: &str| {
            if present {
                errors.push(format!("strategy.{key}: only valid for {owner}, not {}", kind.label()));
            }
        };
        if kind != StrategyKind::Lora {
            forbid("lora_rank", self.lora_rank.is_some(), "LoRA");
            forbid("lora_targets", self.lora_targets.is_some(), "LoRA");
        }
        if kind != StrategyKind::Adapter {
            forbid("adapter_reduction", self.adapter_reduction.is_some(), "CLIP-Adapter");
            forbid("adapter_blend", self.adapter_blend.is_some(), "CLIP-Adapter");
            forbid("adapter_towers", self.adapter_towers.is_some(), "CLIP-Adapter");
        }
        if kind != StrategyKind::AClip {
            forbid("aclip_max_block", self.aclip_max_block.is_some(), "A-CLIP");
        }
        let strategy = match kind {
            StrategyKind::Lora => {
                let rank = self.lora_rank.unwrap_or(DEFAULT_LORA_RANK);
                if rank == 0 {
                    errors.push("strategy.lora_rank: must be positive".into());
                }
                let targets = self.lora_targets.clone().unwrap_or_else(default_lora_targets);
                if targets.is_empty() {
                    errors.push("strategy.lora_targets: must name at least one weight".into());
                }
                Strategy::Lora { rank, targets }
            }
            StrategyKind::Adapter => {
                let reduction = self.adapter_reduction.unwrap_or(DEFAULT_ADAPTER_REDUCTION);
                let blend = self.adapter_blend.unwrap_or(DEFAULT_ADAPTER_BLEND);
                if reduction == 0 {
                    errors.push("strategy.adapter_reduction: must be positive".into());
                }
                if !(0.0..=1.0).contains(&blend) {
                    errors.push(format!("strategy.adapter_blend: {blend} is outside [0, 1]"));
                }
                let towers = self.adapter_towers.clone().unwrap_or_else(|| vec![Tower::Image]);
                if towers.is_empty() {
                    errors.push("strategy.adapter_towers: must name at least one tower".into());
                }
                Strategy::Adapter { reduction, blend, towers }
            }
            StrategyKind::AClip => Strategy::AClip {
                max_block: self.aclip_max_block,
            },
            other => Strategy::default_for(other),
        };
        if errors.is_empty() {
            Ok(strategy)
        } else {
            Err(errors)
        }
    }
}
