//! Pretraining, fine-tuning, evaluation schema, layer-shift analysis and sweeps.

mod adam;
mod config;
mod eval;
mod sweep;
mod train;

pub use config::{
    desk_cf_tasks, desk_id_task, parse_strict, short_hash, ExperimentConfig, FewShotSpec, PretrainConfig, ShiftRef, TaskRef,
    DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_WEIGHT_DECAY,
};
pub use eval::{build_eval_sets, displacement, evaluate, EvalSet, Evaluation, Schema};
pub use sweep::{sweep, write_csv, SweepOutcome, CSV_HEADER};
pub use train::{finetune, pretrain, EvalRecord, ExperimentRecord, FinetuneOutcome, PretrainResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualEncoderParams, Tower, IN_PROJ_WEIGHT, OUT_PROJ_WEIGHT};
use crate::model::path;
use crate::peft::merge_lora;
use crate::peft::AdapterKind;
use crate::stats::student_t_quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaRow {
    pub eval_set: String,
    pub accuracy: f64,
    pub accuracy_delta: f64,
    pub delta_ss: f64,
    pub delta_cos: f64,
}

/// Rows of `record` that belong to `schema`; accuracy deltas are FT minus ZS.
pub fn evaluate_schema(record: &ExperimentRecord, schema: Schema) -> Result<Vec<SchemaRow>> {
    let rows: Vec<SchemaRow> = record
        .evals
        .iter()
        .filter(|e| e.schema == schema)
        .map(|e| SchemaRow {
            eval_set: e.name.clone(),
            accuracy: e.accuracy_ft,
            accuracy_delta: e.accuracy_ft - e.accuracy_zs,
            delta_ss: e.delta_ss,
            delta_cos: e.delta_cos,
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Config(format!("record {} has no {schema} evaluation set", record.config_hash)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetShift {
    pub subset: String,
    /// Mean absolute per-parameter change of each layer in the subset.
    pub per_layer: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% t interval across layers; `None` with a single layer.
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShiftReport {
    pub subsets: Vec<SubsetShift>,
}

impl LayerShiftReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetShift> {
        self.subsets.iter().find(|s| s.subset == name)
    }
}

fn effective(params: &DualEncoderParams) -> Result<DualEncoderParams> {
    match params.adapters().map(|a| a.kind()) {
        Some(AdapterKind::Lora { .. }) => merge_lora(params),
        _ => Ok(params.clone()),
    }
}

/// Mean absolute change of attention in- and out-projection weights per tower. LoRA
/// factors are merged first; bottleneck adapters leave these weights untouched.
pub fn layer_shift(zs: &DualEncoderParams, ft: &DualEncoderParams) -> Result<LayerShiftReport> {
    if zs.config() != ft.config() {
        return Err(Error::Input("layer_shift needs two models of the same architecture".into()));
    }
    let zs = effective(zs)?;
    let ft = effective(ft)?;
    let blocks = zs.config().blocks_per_tower;
    let mut subsets = Vec::new();
    for tower in Tower::BOTH {
        for (role, label) in [(IN_PROJ_WEIGHT, "in-proj"), (OUT_PROJ_WEIGHT, "out-proj")] {
            let per_layer: Vec<f64> = (0..blocks)
                .map(|i| {
                    let p = path::attn(tower, i, role);
                    let (a, b) = (zs.get(&p).unwrap(), ft.get(&p).unwrap());
                    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
                })
                .collect();
            let n = per_layer.len() as f64;
            let mean = per_layer.iter().sum::<f64>() / n;
            let ci_half_width = (per_layer.len() > 1).then(|| {
                let var = per_layer.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                student_t_quantile(0.975, n - 1.0) * (var / n).sqrt()
            });
            subsets.push(SubsetShift {
                subset: format!("{tower} {label}"),
                per_layer,
                mean,
                ci_half_width,
            });
        }
    }
    Ok(LayerShiftReport { subsets })
}
