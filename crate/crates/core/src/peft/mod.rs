//! Fine-tuning strategies: trainable masks, adapter injection and masked SGD.

mod adapters;
mod mask;
mod sgd;
mod strategy;

pub use adapters::{
    adapter_shapes, blend_entry, bottleneck_path, inject, lora_a_path, lora_b_path, merge_lora,
    resolve_lora_targets, AdapterKind, AdapterSet,
};
pub use mask::{build_mask, MaskReport, TrainableMask};
pub use sgd::{sgd_step, SgdConfig, SgdState, DEFAULT_MOMENTUM};
pub use strategy::{
    default_lora_targets, Strategy, StrategyBlock, StrategyKind, DEFAULT_ADAPTER_BLEND,
    DEFAULT_ADAPTER_REDUCTION, DEFAULT_LORA_RANK, LR_ACLIP, LR_ADAPTER, LR_BITFIT, LR_FULL, LR_LORA,
};
