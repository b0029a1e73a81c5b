//! Central-difference validation of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named, mutable access to a set of parameter tensors.
pub trait ParamAccess {
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamAccess for BTreeMap<String, Tensor> {
    fn param_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked exhaustively.
    pub coords_per_param: usize,
    /// Lower bound on the relative-error denominator, so that gradients which are
    /// zero up to rounding do not register as failures.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-5,
            tol: 1e-4,
            coords_per_param: 6,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradients returned by `loss` against `(f(θ+h) − f(θ−h)) / 2h`
/// on a seeded subset of coordinates of every parameter.
///
/// `loss` returns the scalar loss and its analytic gradient per parameter name; a
/// parameter missing from the gradient map is treated as having zero gradient.
pub fn grad_check<P, F>(params: &mut P, mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamAccess,
    F: FnMut(&P) -> Result<(f64, BTreeMap<String, Vec<f64>>)>,
{
    if !(opts.h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Input(format!(
            "grad_check needs h > 0 and tol > 0 (h = {}, tol = {})",
            opts.h, opts.tol
        )));
    }
    let (f0, analytic) = loss(params)?;
    if !f0.is_finite() {
        return Err(Error::Degenerate(format!("loss is not finite ({f0})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    for name in params.param_names() {
        let numel = params.param(&name).map(Tensor::numel).unwrap_or(0);
        let coords: Vec<usize> = if numel <= opts.coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(&name);
        let mut max_rel: f64 = 0.0;
        for &i in &coords {
            let original = params.param(&name).unwrap().data()[i];
            params.param_mut(&name).unwrap().data_mut()[i] = original + opts.h;
            let (fp, _) = loss(params)?;
            params.param_mut(&name).unwrap().data_mut()[i] = original - opts.h;
            let (fm, _) = loss(params)?;
            params.param_mut(&name).unwrap().data_mut()[i] = original;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "loss became non-finite while perturbing {name}[{i}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = grad.map(|g| g[i]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        entries.push(GradCheckEntry {
            name,
            checked: coords.len(),
            max_rel_error: max_rel,
            passed: max_rel <= opts.tol,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        entries,
    })
}
