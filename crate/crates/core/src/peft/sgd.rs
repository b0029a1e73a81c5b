use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::TrainableMask;
use crate::autodiff::ParamAccess;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum; one velocity buffer per trainable path.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new<P: ParamAccess>(config: SgdConfig, mask: &TrainableMask, params: &P) -> Self {
        let velocity = mask
            .trainable_paths()
            .into_iter()
            .filter_map(|p| params.param(&p).map(|t| (p, vec![0.0; t.numel()])))
            .collect();
        Self { config, velocity }
    }

    pub fn velocity(&self, path: &str) -> Option<&[f64]> {
        self.velocity.get(path).map(Vec::as_slice)
    }

    pub fn velocity_paths(&self) -> impl Iterator<Item = &String> {
        self.velocity.keys()
    }
}

/// `v ← μ·v + g + λ·θ; θ ← θ − η·v` on trainable paths. Weight decay applies to
/// matrices only (rank ≥ 2); vectors such as biases and gains are not decayed.
pub fn sgd_step<P: ParamAccess>(
    params: &mut P,
    mask: &TrainableMask,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState,
) -> Result<()> {
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay,
    } = state.config;
    for path in mask.trainable_paths() {
        let g = grads
            .get(&path)
            .ok_or_else(|| Error::Usage(format!("no gradient for trainable parameter {path}")))?;
        let theta = params
            .param_mut(&path)
            .ok_or_else(|| Error::Usage(format!("trainable parameter {path} is not in the model")))?;
        if g.len() != theta.numel() {
            return Err(Error::Usage(format!(
                "gradient for {path} has {} values, parameter has {}",
                g.len(),
                theta.numel()
            )));
        }
        let decay = if theta.rank() >= 2 { weight_decay } else { 0.0 };
        let v = state
            .velocity
            .entry(path.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((vi, &gi), th) in v.iter_mut().zip(g).zip(theta.data_mut()) {
            *vi = momentum * *vi + gi + decay * *th;
            *th -= lr * *vi;
        }
    }
    Ok(())
}
