//! AdamW for pretraining.

use std::collections::BTreeMap;

use crate::autodiff::ParamAccess;
use crate::error::{Error, Result};

pub(crate) struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub(crate) fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Decoupled decay on matrices only, as in the SGD path.
    pub(crate) fn step<P: ParamAccess>(&mut self, params: &mut P, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (path, g) in grads {
            let theta = params
                .param_mut(path)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {path}")))?;
            let decay = if theta.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((mi, vi), &gi), th) in m.iter_mut().zip(v.iter_mut()).zip(g).zip(theta.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *th -= self.lr * (update + decay * *th);
            }
        }
        Ok(())
    }
}
