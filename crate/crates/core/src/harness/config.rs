use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::{SgdConfig, Strategy, StrategyBlock, StrategyKind, DEFAULT_MOMENTUM};

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}

/// Hex SHA-256 of the JSON form of `value`, truncated to 16 characters.
pub fn short_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

/// Deserializes JSON, reporting the path of the first offending field.
pub fn parse_strict<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))
}

/// Few-shot subsampling of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    pub k: usize,
    pub seed: u64,
}

/// A named synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    pub name: String,
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<FewShotSpec>,
}

impl TaskRef {
    pub fn build(&self) -> Result<Dataset> {
        let ds = data::generate(&self.task)?;
        match &self.few_shot {
            Some(fs) => data::few_shot(&ds, fs.k, fs.seed),
            None => Ok(ds),
        }
    }
}

/// A shifted copy of the training task's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftRef {
    pub name: String,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub corpus: TaskSpec,
    pub steps: usize,
    /// Classes per batch; each batch holds one sample of each of that many distinct classes.
    pub batch_classes: usize,
    /// AdamW step size.
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl PretrainConfig {
    /// Pretraining used by the desk preset: all 30 world classes, lightly corrupted.
    pub fn desk() -> Self {
        let mut corpus = TaskSpec::new(30, 40, 0.2, 1000);
        corpus.world_seed = 0;
        Self {
            model: ModelConfig::default(),
            corpus,
            steps: 600,
            batch_classes: 30,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        if self.batch_classes < 2 || self.batch_classes > self.corpus.classes {
            return Err(Error::Config(format!(
                "pretrain.batch_classes must lie in 2..={}, got {}",
                self.corpus.classes, self.batch_classes
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("pretrain.learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_strict(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        short_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "PretrainConfig::desk")]
    pub pretrain: PretrainConfig,
    pub strategy: StrategyBlock,
    pub train: TaskRef,
    #[serde(default)]
    pub dg_eval: Vec<ShiftRef>,
    #[serde(default)]
    pub cf_eval: Vec<TaskRef>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Falls back to the strategy's table value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
}

/// The desk ID task: 10 classes drawn out of the pretraining world, shifted and noisier.
pub fn desk_id_task(seed: u64) -> TaskRef {
    let mut task = TaskSpec::new(10, 60, 0.3, seed);
    task.shift = 0.5;
    TaskRef {
        name: "synth-id".into(),
        task,
        few_shot: None,
    }
}

/// Two disjoint 10-class tasks over the world classes the ID task does not use.
pub fn desk_cf_tasks(seed: u64) -> Vec<TaskRef> {
    (0..2)
        .map(|i| {
            let mut task = TaskSpec::new(10, 20, 0.2, seed);
            task.first_class = 10 + 10 * i;
            TaskRef {
                name: format!("synth-cf{}", i + 1),
                task,
                few_shot: None,
            }
        })
        .collect()
}

impl ExperimentConfig {
    /// Desk-scale preset for `kind`: desk ID task, one DG shift, two CF tasks.
    pub fn desk(kind: StrategyKind, seed: u64) -> Self {
        Self {
            pretrain: PretrainConfig::desk(),
            strategy: StrategyBlock::of(kind),
            train: desk_id_task(seed),
            dg_eval: vec![ShiftRef {
                name: "synth-id-shift".into(),
                sigma: 0.3,
                seed: seed.wrapping_add(1),
            }],
            cf_eval: desk_cf_tasks(seed),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: None,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed,
        }
    }

    /// Parses a JSON config. Errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_strict(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses either one config object or an array of them.
    pub fn list_from_json(text: &str) -> Result<Vec<Self>> {
        if !text.trim_start().starts_with('[') {
            return Ok(vec![Self::from_json(text)?]);
        }
        let configs: Vec<Self> = parse_strict(text)?;
        for (i, c) in configs.iter().enumerate() {
            c.validate().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("config [{i}]: {m}")),
                other => other,
            })?;
        }
        Ok(configs)
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy
            .resolve()
            .map_err(|errs| Error::Config(errs.join("; ")))
    }

    pub fn learning_rate(&self) -> Result<f64> {
        Ok(self.lr.unwrap_or(self.strategy()?.kind().default_lr()))
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        Ok(SgdConfig {
            learning_rate: self.learning_rate()?,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.strategy()?;
        self.train.task.validate()?;
        for cf in &self.cf_eval {
            cf.task.validate()?;
            if cf.task.world_classes().any(|c| self.train.task.world_classes().contains(&c)) {
                return Err(Error::Config(format!(
                    "cf_eval `{}` shares classes with the training task",
                    cf.name
                )));
            }
        }
        for dg in &self.dg_eval {
            if !(0.0..=1.0).contains(&dg.sigma) {
                return Err(Error::Config(format!("dg_eval `{}`: sigma {} outside [0, 1]", dg.name, dg.sigma)));
            }
        }
        let mut names: Vec<&str> = std::iter::once(self.train.name.as_str())
            .chain(self.dg_eval.iter().map(|d| d.name.as_str()))
            .chain(self.cf_eval.iter().map(|c| c.name.as_str()))
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("evaluation set names must be unique".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.learning_rate()?;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be non-negative".into()));
        }
        Ok(())
    }

    /// Hash of the config with the learning rate resolved.
    pub fn hash(&self) -> String {
        let mut resolved = self.clone();
        resolved.lr = self.learning_rate().ok();
        short_hash(&resolved)
    }
}
