//! Accuracy tables, delta-vs-ZS summaries, scatter series and plot data.
//!
//! Input is either a method-by-dataset accuracy table (the shipped fixtures use this
//! shape) or a tidy sweep CSV. Output is plain text plus a JSON document of plot
//! series; both depend only on the input bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::harness::{Schema, CSV_HEADER};
use crate::stats::{filter_positive, log_measure, ols_slope_test, pearson_ci, Sample};

pub const FIXTURE_ID: &str = include_str!("../fixtures/id.csv");
pub const FIXTURE_DG: &str = include_str!("../fixtures/dg.csv");
pub const FIXTURE_CF: &str = include_str!("../fixtures/cf.csv");

const ZS: &str = "ZS";

/// The shipped accuracy table for `schema`.
pub fn fixture(schema: Schema) -> AccuracyTable {
    let text = match schema {
        Schema::Id => FIXTURE_ID,
        Schema::Dg => FIXTURE_DG,
        Schema::Cf => FIXTURE_CF,
    };
    AccuracyTable::parse(text, schema).expect("shipped fixtures parse")
}

/// A percentage kept as the exact string it was written as.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub text: String,
    /// Value in hundredths of a percentage point.
    pub hundredths: i64,
}

impl Cell {
    fn parse(text: &str) -> Option<Self> {
        let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
        let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if !digits(whole) || (text.contains('.') && !digits(frac)) || frac.len() > 2 {
            return None;
        }
        let mut hundredths: i64 = whole.parse().ok()?;
        hundredths *= 100;
        if !frac.is_empty() {
            let f: i64 = frac.parse().ok()?;
            hundredths += if frac.len() == 1 { f * 10 } else { f };
        }
        Some(Self {
            text: text.to_string(),
            hundredths,
        })
    }
}

/// Signed hundredths rendered as `+20.25` / `-39.58`.
pub fn format_delta(hundredths: i64) -> String {
    let sign = if hundredths < 0 { '-' } else { '+' };
    let a = hundredths.abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub data: String,
    pub cells: Vec<Cell>,
}

/// Dataset rows by method columns; the first method column is ZS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccuracyTable {
    pub schema: Schema,
    pub methods: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeltaCell {
    pub method: String,
    pub hundredths: i64,
    /// Accuracy fell below ZS on a CF set.
    pub forgetting: bool,
}

impl AccuracyTable {
    pub fn parse(text: &str, schema: Schema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 || header[0] != "data" || header[1] != ZS {
            return Err(Error::Input(format!(
                "accuracy table header must start with `data,{ZS}`, got `{}`",
                header.join(",")
            )));
        }
        let methods = header[1..].to_vec();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Input(format!("row {}: expected {} fields, got {}", i + 1, header.len(), rec.len())));
            }
            let cells = rec
                .iter()
                .skip(1)
                .zip(&methods)
                .map(|(v, m)| {
                    Cell::parse(v).ok_or_else(|| Error::Input(format!("row {} column {m}: `{v}` is not a percentage", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(TableRow {
                data: rec[0].to_string(),
                cells,
            });
        }
        Ok(Self { schema, methods, rows })
    }

    pub fn cell(&self, data: &str, method: &str) -> Option<&Cell> {
        let col = self.methods.iter().position(|m| m == method)?;
        self.rows.iter().find(|r| r.data == data).map(|r| &r.cells[col])
    }

    /// Methods holding the row maximum (more than one on ties).
    pub fn best(&self, row: &TableRow) -> Vec<&str> {
        let max = row.cells.iter().map(|c| c.hundredths).max().unwrap_or(0);
        self.methods
            .iter()
            .zip(&row.cells)
            .filter(|(_, c)| c.hundredths == max)
            .map(|(m, _)| m.as_str())
            .collect()
    }

    /// Every non-ZS method minus ZS for `row`.
    pub fn deltas(&self, row: &TableRow) -> Vec<DeltaCell> {
        let zs = row.cells[0].hundredths;
        self.methods[1..]
            .iter()
            .zip(&row.cells[1..])
            .map(|(m, c)| {
                let d = c.hundredths - zs;
                DeltaCell {
                    method: m.clone(),
                    hundredths: d,
                    forgetting: self.schema == Schema::Cf && d < 0,
                }
            })
            .collect()
    }

    pub fn render(&self) -> Report {
        let mut text = format!("{} accuracy (%)\n\n", self.schema);
        let mut header = vec!["data".to_string()];
        header.extend(self.methods.iter().cloned());
        header.push("best".into());
        text += &markdown_row(&header);
        text += &markdown_rule(header.len());
        for row in &self.rows {
            let mut cells = vec![row.data.clone()];
            cells.extend(row.cells.iter().map(|c| c.text.clone()));
            cells.push(self.best(row).join(" "));
            text += &markdown_row(&cells);
        }

        text += &format!("\n{} delta vs {ZS} (points)\n\n", self.schema);
        let mut header = vec!["data".to_string()];
        header.extend(self.methods[1..].iter().cloned());
        text += &markdown_row(&header);
        text += &markdown_rule(header.len());
        for row in &self.rows {
            let mut cells = vec![row.data.clone()];
            cells.extend(self.deltas(row).iter().map(|d| {
                let s = format_delta(d.hundredths);
                if d.forgetting {
                    format!("{s} forgetting")
                } else {
                    s
                }
            }));
            text += &markdown_row(&cells);
        }

        let series: Vec<Value> = self.methods[1..]
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let points: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| {
                        let d = &self.deltas(r)[j];
                        json!({
                            "data": r.data,
                            "accuracy": hundredths_to_f64(r.cells[j + 1].hundredths),
                            "delta": hundredths_to_f64(d.hundredths),
                            "forgetting": d.forgetting,
                        })
                    })
                    .collect();
                json!({ "method": m, "points": points })
            })
            .collect();
        let best: Vec<Value> = self
            .rows
            .iter()
            .map(|r| json!({ "data": r.data, "best": self.best(r) }))
            .collect();
        let plot = json!({
            "kind": "accuracy_table",
            "schema": self.schema.as_str(),
            "delta_bars": series,
            "best": best,
        });
        Report { text, plot }
    }
}

fn hundredths_to_f64(h: i64) -> f64 {
    h as f64 / 100.0
}

fn markdown_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn markdown_rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

/// Rendered text plus plot series.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub plot: Value,
}

impl Report {
    pub fn plot_json(&self) -> String {
        serde_json::to_string_pretty(&self.plot).expect("plot data serializes") + "\n"
    }

    fn concat(reports: Vec<Report>) -> Report {
        let text = reports.iter().map(|r| r.text.as_str()).collect::<Vec<_>>().join("\n");
        let plot = Value::Array(reports.into_iter().map(|r| r.plot).collect());
        Report { text, plot }
    }
}

/// All three shipped tables in ID, DG, CF order.
pub fn report_fixtures() -> Report {
    Report::concat(Schema::ALL.iter().map(|&s| fixture(s).render()).collect())
}

/// One row of a tidy sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_set: String,
    pub method: String,
    pub eval_set: String,
    pub schema: Schema,
    pub accuracy: f64,
    pub ss_zs: f64,
    pub ss_ft: f64,
    pub acs_zs: f64,
    pub acs_ft: f64,
    pub delta_ss: f64,
    pub delta_cos: f64,
    pub seed: u64,
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<&str> = reader.headers()?.iter().collect();
    if header != CSV_HEADER {
        return Err(Error::Input(format!(
            "sweep CSV header mismatch: expected `{}`, got `{}`",
            CSV_HEADER.join(","),
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Input(format!("sweep CSV row {}: {e}", i + 1))))
        .collect()
}

/// Input shapes accepted by [`report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Table,
    Sweep,
}

/// Classifies a CSV by its header line.
pub fn detect(text: &str) -> Result<InputKind> {
    let first = text.lines().next().unwrap_or("").trim_end_matches('\r');
    if first == CSV_HEADER.join(",") {
        Ok(InputKind::Sweep)
    } else if first.starts_with(&format!("data,{ZS}")) {
        Ok(InputKind::Table)
    } else {
        Err(Error::Input(format!(
            "unrecognized CSV header `{first}`: expected an accuracy table (`data,{ZS},...`) or a sweep CSV"
        )))
    }
}

/// Reports on `text`. `schema` labels an accuracy table and is ignored for sweeps.
pub fn report(text: &str, schema: Option<Schema>) -> Result<Report> {
    match detect(text)? {
        InputKind::Table => {
            let schema = schema.ok_or_else(|| Error::Usage("an accuracy table needs --schema ID|DG|CF".into()))?;
            Ok(AccuracyTable::parse(text, schema)?.render())
        }
        InputKind::Sweep => report_sweep(&parse_sweep_csv(text)?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            median,
            sd,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

/// Mean accuracy per (schema, eval set, method) and the mean paired difference to
/// the ZS row with the same train set, eval set and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodDelta {
    pub schema: Schema,
    pub eval_set: String,
    pub method: String,
    pub runs: usize,
    pub accuracy: f64,
    pub delta: Option<f64>,
    pub forgetting: bool,
}

pub fn method_deltas(rows: &[SweepRow]) -> Vec<MethodDelta> {
    let zs: BTreeMap<(&str, &str, u64), f64> = rows
        .iter()
        .filter(|r| r.method == ZS)
        .map(|r| ((r.train_set.as_str(), r.eval_set.as_str(), r.seed), r.accuracy))
        .collect();
    let mut groups: BTreeMap<(Schema, &str, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.schema, r.eval_set.as_str(), r.method.as_str())).or_default();
        g.0.push(r.accuracy);
        if let Some(z) = zs.get(&(r.train_set.as_str(), r.eval_set.as_str(), r.seed)) {
            g.1.push(r.accuracy - z);
        }
    }
    groups
        .into_iter()
        .map(|((schema, eval_set, method), (acc, deltas))| {
            let delta = (deltas.len() == acc.len()).then(|| mean(&deltas));
            MethodDelta {
                schema,
                eval_set: eval_set.to_string(),
                method: method.to_string(),
                runs: acc.len(),
                accuracy: mean(&acc),
                delta,
                forgetting: schema == Schema::Cf && delta.is_some_and(|d| d < 0.0),
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Points `(ln measure, accuracy)` for every row with a positive measure, plus the
/// correlation and regression fitted to them when there are enough points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scatter {
    pub measure: String,
    pub points: Vec<ScatterPoint>,
    pub dropped: usize,
    pub pearson: Option<PearsonOverlay>,
    pub ols: Option<OlsOverlay>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub method: String,
    pub eval_set: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PearsonOverlay {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlsOverlay {
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
}

pub fn scatter(rows: &[SweepRow], measure: &str, value: impl Fn(&SweepRow) -> f64) -> Result<Scatter> {
    let values: Vec<f64> = rows.iter().map(&value).collect();
    let index: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
    let (kept, idx) = filter_positive(&values, &index, measure);
    let logs = log_measure(&kept)?;
    let points: Vec<ScatterPoint> = idx
        .iter()
        .zip(&logs)
        .map(|(&i, &x)| {
            let r = &rows[i as usize];
            ScatterPoint {
                method: r.method.clone(),
                eval_set: r.eval_set.clone(),
                x,
                y: r.accuracy,
            }
        })
        .collect();
    let sample = (points.len() >= 3)
        .then(|| Sample::new(logs.clone(), points.iter().map(|p| p.y).collect()))
        .transpose()?;
    let pearson = sample.as_ref().and_then(|s| pearson_ci(s, 0.95).ok()).map(|(r, lo, hi)| PearsonOverlay {
        r,
        ci_low: lo,
        ci_high: hi,
    });
    let ols = sample.as_ref().and_then(|s| ols_slope_test(s).ok()).map(|o| OlsOverlay {
        slope: o.slope,
        intercept: o.intercept,
        p_value: o.p_value_slope,
    });
    Ok(Scatter {
        measure: measure.to_string(),
        dropped: rows.len() - points.len(),
        points,
        pearson,
        ols,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaDistribution {
    pub schema: Schema,
    pub method: String,
    pub delta_ss: Summary,
    pub delta_cos: Summary,
}

pub fn delta_distributions(rows: &[SweepRow]) -> Vec<DeltaDistribution> {
    let mut groups: BTreeMap<(Schema, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.schema, r.method.as_str())).or_default();
        g.0.push(r.delta_ss);
        g.1.push(r.delta_cos);
    }
    groups
        .into_iter()
        .map(|((schema, method), (ss, cos))| DeltaDistribution {
            schema,
            method: method.to_string(),
            delta_ss: Summary::of(&ss).expect("group is non-empty"),
            delta_cos: Summary::of(&cos).expect("group is non-empty"),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "n/a".into())
}

pub fn report_sweep(rows: &[SweepRow]) -> Result<Report> {
    let deltas = method_deltas(rows);
    let scatters = [
        scatter(rows, "ss", |r| r.ss_ft)?,
        scatter(rows, "acs", |r| r.acs_ft)?,
    ];
    let dists = delta_distributions(rows);

    let mut text = format!("accuracy vs {ZS} ({} rows)\n\n", rows.len());
    let header: Vec<String> = ["schema", "eval_set", "method", "runs", "accuracy", "delta"].map(String::from).into();
    text += &markdown_row(&header);
    text += &markdown_rule(header.len());
    for d in &deltas {
        let delta = fmt_opt(d.delta, |v| {
            let s = format!("{:+.2}", 100.0 * v);
            if d.forgetting {
                format!("{s} forgetting")
            } else {
                s
            }
        });
        text += &markdown_row(&[
            d.schema.to_string(),
            d.eval_set.clone(),
            d.method.clone(),
            d.runs.to_string(),
            format!("{:.2}", 100.0 * d.accuracy),
            delta,
        ]);
    }

    text += "\nlog measure vs accuracy\n\n";
    let header: Vec<String> = ["measure", "points", "dropped", "r", "95% CI", "slope", "p"].map(String::from).into();
    text += &markdown_row(&header);
    text += &markdown_rule(header.len());
    for s in &scatters {
        text += &markdown_row(&[
            s.measure.clone(),
            s.points.len().to_string(),
            s.dropped.to_string(),
            fmt_opt(s.pearson.as_ref().map(|p| p.r), |v| format!("{v:.4}")),
            s.pearson
                .as_ref()
                .map(|p| format!("[{:.4}, {:.4}]", p.ci_low, p.ci_high))
                .unwrap_or_else(|| "n/a".into()),
            fmt_opt(s.ols.as_ref().map(|o| o.slope), |v| format!("{v:.4}")),
            fmt_opt(s.ols.as_ref().map(|o| o.p_value), |v| format!("{v:.3e}")),
        ]);
    }

    text += "\nalignment deltas (ZS minus FT for ss, FT minus ZS for acs)\n\n";
    let header: Vec<String> = ["schema", "method", "n", "delta_ss mean", "delta_ss median", "delta_cos mean", "delta_cos median"]
        .map(String::from)
        .into();
    text += &markdown_row(&header);
    text += &markdown_rule(header.len());
    for d in &dists {
        text += &markdown_row(&[
            d.schema.to_string(),
            d.method.clone(),
            d.delta_ss.n.to_string(),
            format!("{:+.4}", d.delta_ss.mean),
            format!("{:+.4}", d.delta_ss.median),
            format!("{:+.4}", d.delta_cos.mean),
            format!("{:+.4}", d.delta_cos.median),
        ]);
    }

    let plot = json!({
        "kind": "sweep",
        "accuracy_deltas": deltas,
        "scatter": scatters,
        "delta_distributions": dists,
    });
    Ok(Report { text, plot })
}
