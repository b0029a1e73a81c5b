use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamW;
use super::config::{ExperimentConfig, PretrainConfig};
use super::eval::{build_eval_sets, displacement, evaluate, Schema};
use crate::alignment::{alignment_delta, AlignmentReport};
use crate::data;
use crate::error::{Error, Result};
use crate::model::{self, checkpoint, Batch, DualEncoderParams, Objective, TokenMatrix};
use crate::peft::{build_mask, inject, sgd_step, SgdState, Strategy};
use crate::seed;

const STREAM_PRETRAIN_BATCH: u64 = 11;
const STREAM_EPOCH: u64 = 12;
const STREAM_INJECT: u64 = 13;

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: DualEncoderParams,
    /// Contrastive loss of every step, measured before that step's update.
    pub loss_curve: Vec<f64>,
}

/// Symmetric contrastive training of every parameter with AdamW on the pretraining corpus. Each
/// batch holds one sample from each of `batch_classes` distinct classes, so no caption
/// in a batch is a false negative.
pub fn pretrain(config: &PretrainConfig) -> Result<PretrainResult> {
    config.validate()?;
    let corpus = data::generate(&config.corpus)?;
    corpus.check_model(&config.model)?;
    let mut params = DualEncoderParams::init(&config.model, config.seed)?;
    let mask = build_mask(&Strategy::Full, &config.model)?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let classes = corpus.classes();
    let by_class: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..corpus.train.len()).filter(|&i| corpus.train.labels[i] == c).collect())
        .collect();
    let trainable = |p: &str| mask.is_trainable(p);
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = seed::rng(config.seed, &[STREAM_PRETRAIN_BATCH, step as u64]);
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut rng);
        let rows: Vec<usize> = order[..config.batch_classes]
            .iter()
            .map(|&c| by_class[c][rng.random_range(0..by_class[c].len())])
            .collect();
        let batch = corpus.train.select(&rows).batch();
        let (loss, grads) = model::loss_and_grads(&params, Objective::Contrastive, &batch, None, &trainable)
            .map_err(|e| Error::Degenerate(format!("pretraining diverged at step {step}: {e}")))?;
        loss_curve.push(loss);
        opt.step(&mut params, &grads)?;
        params.clamp_logit_scale();
    }
    Ok(PretrainResult { params, loss_curve })
}

/// Outcome on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub schema: Schema,
    pub accuracy_zs: f64,
    pub accuracy_ft: f64,
    pub zs: AlignmentReport,
    pub ft: AlignmentReport,
    /// `ss_ZS − ss_FT`.
    pub delta_ss: f64,
    /// `acs_FT − acs_ZS`.
    pub delta_cos: f64,
    /// Mean L2 distance between ZS and FT embeddings of this set.
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub method: String,
    pub train_set: String,
    pub seed: u64,
    pub learning_rate: f64,
    pub trainable_count: usize,
    /// 1-based epoch of the kept checkpoint; `None` when nothing was trained.
    pub best_epoch: Option<usize>,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Parameter paths whose values differ from the ZS model.
    pub changed_paths: Vec<String>,
    pub evals: Vec<EvalRecord>,
}

impl ExperimentRecord {
    pub fn eval(&self, name: &str) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.name == name)
    }

    pub fn id_eval(&self) -> &EvalRecord {
        self.evals.iter().find(|e| e.schema == Schema::Id).expect("records always hold the ID set")
    }
}

/// Record plus the kept fine-tuned parameters.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub record: ExperimentRecord,
    pub params: DualEncoderParams,
}

fn class_accuracy(params: &DualEncoderParams, images: &TokenMatrix, labels: &[usize], prompts: &TokenMatrix) -> Result<f64> {
    model::accuracy(params, images, labels, prompts)
}

/// Masked SGD on the classification loss, keeping the checkpoint with the best
/// validation accuracy (earliest on ties). With `out_dir`, writes
/// `<out_dir>/<hash>/epoch-<n>.dep1` for the kept epoch and `record.json`.
pub fn finetune(zs: &DualEncoderParams, config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<FinetuneOutcome> {
    config.validate()?;
    if zs.config() != &config.pretrain.model {
        return Err(Error::Config("zero-shot model does not match the configured architecture".into()));
    }
    let strategy = config.strategy()?;
    let (train_ds, sets) = build_eval_sets(config)?;
    train_ds.check_model(zs.config())?;
    if train_ds.val.is_empty() {
        return Err(Error::Config(format!("task `{}` has an empty validation split", config.train.name)));
    }
    let prompts = train_ds.class_prompts();
    let (mut params, mask) = if strategy.injects_adapters() {
        inject(&strategy, zs, seed::derive(config.seed, &[STREAM_INJECT]))?
    } else {
        (zs.clone(), build_mask(&strategy, zs.config())?)
    };
    let trainable = |p: &str| mask.is_trainable(p);
    let mut state = SgdState::new(config.sgd()?, &mask, &params);
    let mut best: Option<(usize, f64, DualEncoderParams)> = None;
    let mut train_loss = Vec::new();
    let mut val_accuracy = Vec::new();
    let n = train_ds.train.len();
    if mask.trainable_count() > 0 {
        for epoch in 1..=config.epochs {
            let mut rng = seed::rng(config.seed, &[STREAM_EPOCH, epoch as u64]);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Batch = train_ds.train.select(chunk).batch();
                let (loss, grads) =
                    model::loss_and_grads(&params, Objective::Classification, &batch, Some(&prompts), &trainable)
                        .map_err(|e| Error::Degenerate(format!("fine-tuning diverged in epoch {epoch}: {e}")))?;
                total += loss * chunk.len() as f64;
                sgd_step(&mut params, &mask, &grads, &mut state)?;
                params.clamp_logit_scale();
            }
            train_loss.push(total / n as f64);
            let acc = class_accuracy(&params, &train_ds.val.images, &train_ds.val.labels, &prompts)?;
            val_accuracy.push(acc);
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, params.clone()));
            }
            log::debug!("epoch {epoch}: train loss {:.4}, val acc {acc:.4}", total / n as f64);
        }
    }
    let (best_epoch, ft) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, params),
    };
    let mut evals = Vec::with_capacity(sets.len());
    for set in &sets {
        let z = evaluate(zs, set)?;
        let f = evaluate(&ft, set)?;
        let delta = alignment_delta(&z.report, &f.report)?;
        evals.push(EvalRecord {
            name: set.name.clone(),
            schema: set.schema,
            accuracy_zs: z.accuracy,
            accuracy_ft: f.accuracy,
            delta_ss: delta.delta_ss,
            delta_cos: delta.delta_cos,
            displacement: displacement(&z, &f),
            zs: z.report,
            ft: f.report,
        });
    }
    let record = ExperimentRecord {
        config_hash: config.hash(),
        method: strategy.kind().label().to_string(),
        train_set: config.train.name.clone(),
        seed: config.seed,
        learning_rate: config.learning_rate()?,
        trainable_count: mask.trainable_count(),
        best_epoch,
        train_loss,
        val_accuracy,
        changed_paths: ft.changed_paths(zs),
        evals,
    };
    if let Some(dir) = out_dir {
        let run = dir.join(&record.config_hash);
        std::fs::create_dir_all(&run).map_err(|e| Error::io(&run, e))?;
        let ckpt = run.join(format!("epoch-{}.dep1", best_epoch.unwrap_or(0)));
        checkpoint::save(&ft, &ckpt)?;
        let rec = run.join("record.json");
        std::fs::write(&rec, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&rec, e))?;
    }
    Ok(FinetuneOutcome { record, params: ft })
}
