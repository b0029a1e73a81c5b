use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::train::{finetune, pretrain, ExperimentRecord};
use crate::error::{Error, Result};
use crate::model::DualEncoderParams;

pub const CSV_HEADER: [&str; 12] = [
    "train_set", "method", "eval_set", "schema", "accuracy", "ss_zs", "ss_ft", "acs_zs", "acs_ft", "delta_ss",
    "delta_cos", "seed",
];

#[derive(Debug)]
pub struct SweepOutcome {
    /// Successful runs, sorted by config hash.
    pub records: Vec<ExperimentRecord>,
    /// `(config hash, error)` of every failed run, sorted by hash.
    pub failures: Vec<(String, String)>,
}

/// Writes one row per (record, evaluation set) in record order.
pub fn write_csv<W: std::io::Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        for e in &r.evals {
            w.write_record([
                r.train_set.clone(),
                r.method.clone(),
                e.name.clone(),
                e.schema.to_string(),
                e.accuracy_ft.to_string(),
                e.zs.ss.to_string(),
                e.ft.ss.to_string(),
                e.zs.acs.to_string(),
                e.ft.acs.to_string(),
                e.delta_ss.to_string(),
                e.delta_cos.to_string(),
                r.seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

impl SweepOutcome {
    pub fn csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_csv(&self.records, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Runs every config on up to `jobs` threads. Each distinct pretraining setup is
/// trained once and shared. A failing run is logged and recorded; the rest continue.
pub fn sweep(configs: &[ExperimentConfig], jobs: usize, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} threads: {e}")))?;
    pool.install(|| {
        let mut pretrains: BTreeMap<String, &ExperimentConfig> = BTreeMap::new();
        for c in configs {
            pretrains.entry(c.pretrain.hash()).or_insert(c);
        }
        let zs: BTreeMap<String, std::result::Result<DualEncoderParams, String>> = pretrains
            .into_par_iter()
            .map(|(h, c)| (h, pretrain(&c.pretrain).map(|r| r.params).map_err(|e| e.to_string())))
            .collect();
        let results: Vec<(String, std::result::Result<ExperimentRecord, String>)> = configs
            .par_iter()
            .map(|c| {
                let hash = c.hash();
                let run = match &zs[&c.pretrain.hash()] {
                    Ok(p) => finetune(p, c, out_dir).map(|o| o.record).map_err(|e| e.to_string()),
                    Err(e) => Err(format!("pretraining failed: {e}")),
                };
                if let Err(e) = &run {
                    log::error!("run {hash} failed: {e}");
                }
                (hash, run)
            })
            .collect();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for (hash, r) in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => failures.push((hash, e)),
            }
        }
        records.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
        failures.sort();
        Ok(SweepOutcome { records, failures })
    })
}
