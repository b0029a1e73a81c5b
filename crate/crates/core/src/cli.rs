//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{measure, modality_clusters, read_embeddings, silhouette_score};
use crate::error::{Error, Result};
use crate::harness::{self, ExperimentConfig, PretrainConfig, Schema};
use crate::model::{checkpoint, DualEncoderParams};
use crate::peft::{build_mask, inject};
use crate::report;
use crate::stats::regress_measure;

pub const OUT_ENV: &str = "ALIGNPEFT_OUT";

#[derive(Debug, Parser)]
#[command(name = "alignpeft", version, about = "PEFT and alignment experiments on a toy dual encoder")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; the ALIGNPEFT_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of every config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastively pretrain the zero-shot model.
    Pretrain,
    /// Fine-tune one experiment config and evaluate it on its ID/DG/CF sets.
    Finetune {
        /// Zero-shot checkpoint; pretrains from the config when absent.
        #[arg(long)]
        zs: Option<PathBuf>,
    },
    /// Run a list of experiment configs and write the tidy results CSV.
    Sweep,
    /// ACS and silhouette score of two embedding files.
    Measure {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
    },
    /// Regress accuracy on one measure of a measure CSV.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        measure: String,
        /// Regress on the natural log of the measure.
        #[arg(long)]
        log: bool,
    },
    /// Render an accuracy table or sweep CSV; the shipped tables when no input is given.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Schema of an accuracy-table input (ID, DG or CF).
        #[arg(long)]
        schema: Option<String>,
    },
    /// Print the normalized config with defaults filled in, and its hash.
    Validate,
}

/// Exit status for an error: 2 for bad input or configuration, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Usage(_)
        | Error::Input(_)
        | Error::Domain { .. }
        | Error::Format(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::Shape { .. } | Error::Degenerate(_) => 1,
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("ALIGNPEFT_LOG").try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn out_dir(common: &Common) -> Option<PathBuf> {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => common.out.clone(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn in_file(path: &Path, text: Result<String>) -> Result<String> {
    text.map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Input(format!("{}: {other}", path.display())),
    })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn require_config(common: &Common) -> Result<&Path> {
    common
        .config
        .as_deref()
        .ok_or_else(|| Error::Usage("--config <path> is required".into()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_experiments(common: &Common) -> Result<Vec<ExperimentConfig>> {
    let path = require_config(common)?;
    let text = in_file(path, read_text(path))?;
    let mut configs = with_path(path, ExperimentConfig::list_from_json(&text))?;
    if let Some(seed) = common.seed {
        for c in &mut configs {
            c.seed = seed;
        }
    }
    Ok(configs)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let common = &cli.common;
    let out = out_dir(common);
    match &cli.command {
        Command::Pretrain => {
            let mut config = match &common.config {
                Some(p) => with_path(p, PretrainConfig::from_json(&in_file(p, read_text(p))?))?,
                None => PretrainConfig::desk(),
            };
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let out = out.ok_or_else(|| Error::Usage("pretrain needs --out <dir>".into()))?;
            let result = harness::pretrain(&config)?;
            let hash = config.hash();
            let ckpt = out.join(format!("zs-{hash}.dep1"));
            write_file(&ckpt, &checkpoint::to_bytes(&result.params))?;
            let summary = serde_json::json!({ "hash": hash, "config": config, "loss_curve": result.loss_curve });
            write_file(&out.join(format!("zs-{hash}.json")), &serde_json::to_vec_pretty(&summary)?)?;
            println!("{}", ckpt.display());
            Ok(0)
        }
        Command::Finetune { zs } => {
            let configs = load_experiments(common)?;
            let [config] = configs.as_slice() else {
                return Err(Error::Usage("finetune takes exactly one config; use sweep for a list".into()));
            };
            let params = match zs {
                Some(p) => checkpoint::load(p, &config.pretrain.model)?,
                None => harness::pretrain(&config.pretrain)?.params,
            };
            let outcome = harness::finetune(&params, config, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&outcome.record)?);
            Ok(0)
        }
        Command::Sweep => {
            let configs = load_experiments(common)?;
            let outcome = harness::sweep(&configs, common.jobs, out.as_deref())?;
            let csv = outcome.csv()?;
            match &out {
                Some(dir) => write_file(&dir.join("results.csv"), csv.as_bytes())?,
                None => print!("{csv}"),
            }
            for (hash, err) in &outcome.failures {
                eprintln!("run {hash} failed: {err}");
            }
            Ok(if outcome.failures.is_empty() { 0 } else { 1 })
        }
        Command::Measure { images, texts } => {
            let (i, _) = read_embeddings(images)?;
            let (t, _) = read_embeddings(texts)?;
            match measure(&i, &t, "cli") {
                Ok(r) => {
                    println!("acs {}", r.acs);
                    println!("ss {}", r.ss);
                    if let Some(dir) = &out {
                        write_file(&dir.join("alignment.json"), &serde_json::to_vec_pretty(&r)?)?;
                    }
                }
                Err(Error::Degenerate(why)) => {
                    let ss = silhouette_score(&modality_clusters(&i, &t)?);
                    eprintln!("warning: acs undefined: {why}");
                    println!("acs n/a");
                    println!("ss {ss}");
                }
                Err(e) => return Err(e),
            }
            Ok(0)
        }
        Command::Stats { input, measure, log } => {
            let rows = crate::stats::read_measure_csv(input)
                .map_err(|e| if matches!(e, Error::Io { .. }) { e } else { Error::Input(format!("{}: {e}", input.display())) })?;
            let result = regress_measure(&rows, measure, *log)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(0)
        }
        Command::Report { input, schema } => {
            let schema = schema.as_deref().map(Schema::parse).transpose()?;
            let rendered = match input {
                Some(p) => {
                    let text = read_text(p)?;
                    report::report(&text, schema).map_err(|e| match e {
                        Error::Input(m) => Error::Input(format!("{}: {m}", p.display())),
                        other => other,
                    })?
                }
                None => match schema {
                    Some(s) => report::fixture(s).render(),
                    None => report::report_fixtures(),
                },
            };
            print!("{}", rendered.text);
            if let Some(dir) = &out {
                write_file(&dir.join("report.txt"), rendered.text.as_bytes())?;
                write_file(&dir.join("plot.json"), rendered.plot_json().as_bytes())?;
            }
            Ok(0)
        }
        Command::Validate => {
            let configs = load_experiments(common)?;
            for config in &configs {
                let mut normalized = config.clone();
                normalized.lr = Some(config.learning_rate()?);
                let strategy = config.strategy()?;
                let params = DualEncoderParams::init(&config.pretrain.model, config.pretrain.seed)?;
                let mask = if strategy.injects_adapters() {
                    inject(&strategy, &params, 0)?.1
                } else {
                    build_mask(&strategy, &config.pretrain.model)?
                };
                let doc = serde_json::json!({
                    "config": normalized,
                    "hash": config.hash(),
                    "mask": mask.report(&strategy),
                });
                println!("{}", serde_json::to_string_pretty(&doc)?);
            }
            Ok(0)
        }
    }
}
