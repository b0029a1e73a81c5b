//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use alignpeft::alignment::{modality_clusters, silhouette_score, ClusterAssignment, EmbeddingSet, Modality};
use alignpeft::autodiff::{grad_check, GradCheckOptions};
use alignpeft::data::{self, TaskSpec};
use alignpeft::harness::{
    finetune, pretrain, sweep, ExperimentConfig, ExperimentRecord, PretrainConfig, Schema, ShiftRef, TaskRef,
};
use alignpeft::model::{encode_image, encode_text, loss_and_grads, DualEncoderParams, ModelConfig, Objective};
use alignpeft::peft::{build_mask, inject, merge_lora, Strategy, StrategyBlock, StrategyKind};
use alignpeft::report::{fixture, report_fixtures};
use alignpeft::seed;
use alignpeft::stats::{ols_slope_test, pearson_ci, student_t_cdf, Sample};
use alignpeft::tensor::Tensor;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ACLIP_DESK_LR: f64 = 1e-4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---- 1 ---------------------------------------------------------------------

fn oracle_silhouette(points: &[Vec<f64>], ids: &[usize], k: usize) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..points.len() {
            if j != i {
                sums[ids[j]] += dist(&points[i], &points[j]);
                counts[ids[j]] += 1;
            }
        }
        if counts[ids[i]] == 0 {
            continue;
        }
        let a = sums[ids[i]] / counts[ids[i]] as f64;
        let b = (0..k)
            .filter(|&c| c != ids[i])
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

fn criterion_1() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    pool.install(|| {
        for case in 0..100 {
            let k = [2, 3, 5][case % 3];
            let n = rng.random_range(k.max(4)..=200);
            let d = rng.random_range(1..=16);
            let mut ids: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
            for i in (1..n).rev() {
                ids.swap(i, rng.random_range(0..=i));
            }
            let points: Vec<Vec<f64>> = ids
                .iter()
                .map(|&c| (0..d).map(|j| rng.random_range(-1.0..1.0) + if j == 0 { c as f64 } else { 0.0 }).collect())
                .collect();
            let t = Tensor::new(vec![n, d], points.concat()).unwrap();
            let got = silhouette_score(&ClusterAssignment::new(k, ids.clone(), t).unwrap());
            worst = worst.max((got - oracle_silhouette(&points, &ids, k)).abs());
        }
    });
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("max |lib - oracle| = {worst:.2e} over 100 instances, {:.2?} on one thread", elapsed),
    )
}

// ---- 2 ---------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let set = |rows: Vec<f64>, m| EmbeddingSet::new(Tensor::new(vec![2, 2], rows).unwrap(), m, vec![0, 1]).unwrap();
    let images = set(vec![0.0, 0.0, 0.0, 1.0], Modality::Image);
    let texts = set(vec![10.0, 0.0, 10.0, 1.0], Modality::Text);
    let ss = silhouette_score(&modality_clusters(&images, &texts).unwrap());
    let b = (10.0 + 101f64.sqrt()) / 2.0;
    let want = (b - 1.0) / b;
    outcome((ss - want).abs() < 1e-9, format!("ss = {ss:.12}, (b-1)/b = {want:.12}"))
}

// ---- 3 ---------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let config = ModelConfig::default();
    let mut paths = 0;
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for s in 0..3u64 {
        let mut params = DualEncoderParams::init(&config, 100 + s).unwrap();
        let ds = data::generate(&TaskSpec::new(3, 10, 0.2, s)).unwrap();
        let batch = ds.train.select(&[0, 1, 2, 3]).batch();
        let prompts = ds.class_prompts();
        for objective in [Objective::Classification, Objective::Contrastive] {
            let opts = GradCheckOptions {
                seed: s,
                h: 1e-5,
                tol: 1e-4,
                coords_per_param: 4,
                ..Default::default()
            };
            let report = grad_check(
                &mut params,
                |p| loss_and_grads(p, objective, &batch, Some(&prompts), &|_| true),
                opts,
            )
            .unwrap();
            paths += report.entries.len();
            worst = worst.max(report.max_rel_error());
            failures.extend(report.failures().map(|f| format!("seed {s} {objective:?} {}", f.name)));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} of {paths} path checks failed, max relative error {worst:.2e}", failures.len()),
    )
}

// ---- 4 ---------------------------------------------------------------------

fn criterion_4(zs: &DualEncoderParams) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [StrategyKind::Full, StrategyKind::AClip, StrategyKind::BitFit, StrategyKind::Lora, StrategyKind::Adapter] {
        let mut cfg = ExperimentConfig::desk(kind, 0);
        cfg.epochs = 5;
        if kind == StrategyKind::AClip {
            cfg.lr = Some(ACLIP_DESK_LR);
        }
        let strategy = cfg.strategy().unwrap();
        let (start, mask) = if strategy.injects_adapters() {
            inject(&strategy, zs, seed::derive(cfg.seed, &[13])).unwrap()
        } else {
            (zs.clone(), build_mask(&strategy, zs.config()).unwrap())
        };
        let out = finetune(zs, &cfg, None).unwrap();
        let changed: BTreeSet<String> = out.params.changed_paths(&start).into_iter().collect();
        let trainable: BTreeSet<String> = mask.trainable_paths().into_iter().collect();
        let same = changed == trainable;
        ok &= same;
        let mut note = format!("{} {}/{}", kind.label(), changed.len(), trainable.len());
        if kind == StrategyKind::AClip {
            let want = 2 * 2 * 3 * 32 * 32;
            ok &= mask.trainable_count() == want && want == 12288;
            note += &format!(" count {}", mask.trainable_count());
        }
        notes.push(note);
    }
    outcome(ok, format!("changed/trainable paths after 5 epochs: {}", notes.join(", ")))
}

// ---- 5 ---------------------------------------------------------------------

fn criterion_5(zs: &DualEncoderParams) -> Outcome {
    let ds = data::generate(&TaskSpec::new(10, 10, 0.2, 9)).unwrap();
    let batch = ds.train.batch();
    let base_i = encode_image(zs, &batch.image_tokens).unwrap();
    let base_t = encode_text(zs, &batch.text_tokens).unwrap();
    let mut worst: f64 = 0.0;
    let both = Strategy::Adapter {
        reduction: 4,
        blend: 0.2,
        towers: vec![alignpeft::model::Tower::Image, alignpeft::model::Tower::Text],
    };
    for strategy in [Strategy::default_for(StrategyKind::Lora), Strategy::default_for(StrategyKind::Adapter), both] {
        let (p, _) = inject(&strategy, zs, 3).unwrap();
        worst = worst.max(encode_image(&p, &batch.image_tokens).unwrap().max_abs_diff(&base_i));
        worst = worst.max(encode_text(&p, &batch.text_tokens).unwrap().max_abs_diff(&base_t));
    }
    let (mut lora, _) = inject(&Strategy::default_for(StrategyKind::Lora), zs, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in lora.paths().into_iter().filter(|n| n.contains("_lora_")) {
        lora.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let merged = merge_lora(&lora).unwrap();
    let merge_diff = encode_image(&lora, &batch.image_tokens)
        .unwrap()
        .max_abs_diff(&encode_image(&merged, &batch.image_tokens).unwrap())
        .max(
            encode_text(&lora, &batch.text_tokens)
                .unwrap()
                .max_abs_diff(&encode_text(&merged, &batch.text_tokens).unwrap()),
        );
    let moved = encode_image(&lora, &batch.image_tokens).unwrap().max_abs_diff(&base_i);
    outcome(
        worst < 1e-10 && merge_diff < 1e-10 && moved > 1e-6,
        format!("injected vs base {worst:.2e}, merged vs adapted {merge_diff:.2e} (adapted moved {moved:.2e})"),
    )
}

// ---- 6 & 7 -----------------------------------------------------------------

struct DeskRuns {
    full: Vec<ExperimentRecord>,
    aclip: Vec<ExperimentRecord>,
    lora: Vec<ExperimentRecord>,
    pretrain_time: Duration,
    full_aclip_time: Duration,
}

fn desk_runs(zs: &DualEncoderParams, pretrain_time: Duration) -> DeskRuns {
    let start = Instant::now();
    let mut full = Vec::new();
    let mut aclip = Vec::new();
    for &s in &SEEDS {
        full.push(finetune(zs, &ExperimentConfig::desk(StrategyKind::Full, s), None).unwrap().record);
        let mut cfg = ExperimentConfig::desk(StrategyKind::AClip, s);
        cfg.lr = Some(ACLIP_DESK_LR);
        aclip.push(finetune(zs, &cfg, None).unwrap().record);
    }
    let full_aclip_time = start.elapsed();
    let lora = SEEDS
        .iter()
        .map(|&s| finetune(zs, &ExperimentConfig::desk(StrategyKind::Lora, s), None).unwrap().record)
        .collect();
    DeskRuns {
        full,
        aclip,
        lora,
        pretrain_time,
        full_aclip_time,
    }
}

fn criterion_6(runs: &DeskRuns) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (label, records) in [("Full", &runs.full), ("A-CLIP", &runs.aclip)] {
        let gains: Vec<f64> = records.iter().map(|r| r.id_eval().accuracy_ft - r.id_eval().accuracy_zs).collect();
        let dss: Vec<f64> = records.iter().map(|r| r.id_eval().delta_ss).collect();
        let (g, d) = (median(&gains), median(&dss));
        ok &= g >= 0.20 && d > 0.0;
        notes.push(format!("{label} median gain {:+.1} pts, median delta_ss {d:+.4}", 100.0 * g));
    }
    let total = runs.pretrain_time + runs.full_aclip_time;
    ok &= total < Duration::from_secs(600);
    outcome(ok, format!("{}; {:.0?} incl. pretraining", notes.join("; "), total))
}

fn cf_displacement(r: &ExperimentRecord) -> f64 {
    let cf: Vec<f64> = r.evals.iter().filter(|e| e.schema == Schema::Cf).map(|e| e.displacement).collect();
    cf.iter().sum::<f64>() / cf.len() as f64
}

fn criterion_7(runs: &DeskRuns) -> Outcome {
    let lora = median(&runs.lora.iter().map(cf_displacement).collect::<Vec<_>>());
    let full = median(&runs.full.iter().map(cf_displacement).collect::<Vec<_>>());
    outcome(lora < full, format!("median CF displacement LoRA {lora:.4e} vs Full {full:.4e}"))
}

// ---- 8 ---------------------------------------------------------------------

/// Normal 0.975 quantile, as tabulated.
const Z_975: f64 = 1.959_963_984_540_054;

fn seeded_pairs(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    let y = x.iter().map(|v| 0.5 * v + rng.random_range(-4.0..4.0)).collect();
    (x, y)
}

/// Student t density normalizer for even `df`, from Γ((ν+1)/2) and Γ(ν/2) written out as products.
fn t_density(df: u32) -> impl Fn(f64) -> f64 {
    assert!(df % 2 == 0);
    let nu = df as f64;
    let mut g_half = std::f64::consts::PI.sqrt();
    let mut x = 0.5;
    while x < nu / 2.0 {
        g_half *= x;
        x += 1.0;
    }
    let g_int: f64 = (1..df / 2).map(|k| k as f64).product();
    let c = g_half / ((nu * std::f64::consts::PI).sqrt() * g_int);
    move |t: f64| c * (1.0 + t * t / nu).powf(-(nu + 1.0) / 2.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_8() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let (x, y) = seeded_pairs(30);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
    let half = Z_975 / (n - 3.0).sqrt();
    let (lo, hi) = (z - half, z + half);
    let back = |v: f64| ((2.0 * v).exp() - 1.0) / ((2.0 * v).exp() + 1.0);
    let (gr, glo, ghi) = pearson_ci(&Sample::new(x, y).unwrap(), 0.95).unwrap();
    let e1 = (gr - r).abs().max((glo - back(lo)).abs()).max((ghi - back(hi)).abs());
    ok &= e1 < 1e-10;
    notes.push(format!("pearson {e1:.1e}"));

    let (x, y) = seeded_pairs(20);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (sse / (n - 2.0) / sxx).sqrt();
    let t = slope / se;
    let p = 1.0 - 2.0 * simpson(t_density(18), 0.0, t.abs(), 20_000);
    let got = ols_slope_test(&Sample::new(x, y).unwrap()).unwrap();
    let e2 = [(got.slope, slope), (got.intercept, intercept), (got.slope_se, se), (got.p_value_slope, p)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ok &= e2 < 1e-10;
    notes.push(format!("ols {e2:.1e} (p = {p:.6})"));

    let c = student_t_cdf(2.228, 10.0);
    ok &= (c - 0.975).abs() < 1e-3;
    notes.push(format!("t_cdf(2.228, 10) = {c:.6}"));
    outcome(ok, notes.join(", "))
}

// ---- 9 ---------------------------------------------------------------------

const TABLES: [(Schema, &[(&str, [&str; 6])]); 3] = [
    (
        Schema::Id,
        &[
            ("Cars", ["58.87", "70.60", "79.12", "73.98", "78.66", "60.30"]),
            ("FMoW-ID", ["14.78", "44.43", "58.67", "53.98", "57.30", "15.24"]),
            ("GTSRB", ["33.65", "83.28", "95.68", "95.19", "96.72", "52.87"]),
            ("16-Shot ImageNet", ["59.24", "64.15", "66.96", "64.93", "66.34", "59.56"]),
            ("SVHN", ["27.27", "62.78", "95.16", "95.15", "96.00", "61.70"]),
        ],
    ),
    (
        Schema::Dg,
        &[
            ("FMoW-ID", ["39.01", "37.51", "46.25", "38.10", "51.89", "39.61"]),
            ("16-Shot ImageNet", ["48.06", "48.53", "50.74", "49.35", "49.69", "48.37"]),
        ],
    ),
    (
        Schema::Cf,
        &[
            ("Cars", ["52.24", "50.62", "51.64", "45.49", "52.66", "52.45"]),
            ("SVHN", ["56.19", "52.62", "53.03", "16.61", "44.27", "57.25"]),
            ("GTSRB", ["55.4", "47.6", "54.75", "28.35", "51.23", "57.37"]),
        ],
    ),
];

const METHODS: [&str; 6] = ["ZS", "CLIP-Adapter", "A-CLIP", "BitFit", "Full", "LoRA"];

const BOLD: [(Schema, &str, &str); 10] = [
    (Schema::Id, "Cars", "A-CLIP"),
    (Schema::Id, "FMoW-ID", "A-CLIP"),
    (Schema::Id, "GTSRB", "Full"),
    (Schema::Id, "16-Shot ImageNet", "A-CLIP"),
    (Schema::Id, "SVHN", "Full"),
    (Schema::Dg, "FMoW-ID", "Full"),
    (Schema::Dg, "16-Shot ImageNet", "A-CLIP"),
    (Schema::Cf, "Cars", "Full"),
    (Schema::Cf, "SVHN", "LoRA"),
    (Schema::Cf, "GTSRB", "LoRA"),
];

fn criterion_9() -> Outcome {
    let rendered = report_fixtures().text;
    let mut cells = 0;
    let mut mismatches = Vec::new();
    for (schema, rows) in TABLES {
        let table = fixture(schema);
        if table.methods != METHODS {
            mismatches.push(format!("{schema} columns"));
        }
        for (data, values) in rows {
            let row_prefix = format!("| {data} | {} |", values.join(" | "));
            if !rendered.contains(&row_prefix) {
                mismatches.push(format!("{schema} {data} row"));
            }
            for (m, v) in METHODS.iter().zip(values) {
                cells += 1;
                if table.cell(data, m).map(|c| c.text.as_str()) != Some(*v) {
                    mismatches.push(format!("{schema} {data} {m}"));
                }
            }
        }
        if table.rows.len() != rows.len() {
            mismatches.push(format!("{schema} row count"));
        }
    }
    for (schema, data, method) in BOLD {
        let table = fixture(schema);
        let row = table.rows.iter().find(|r| r.data == data).unwrap();
        if table.best(row) != vec![method] {
            mismatches.push(format!("{schema} {data} best {:?}", table.best(row)));
        }
    }
    let spot = ["79.12", "16.61", "51.89"].iter().all(|v| rendered.contains(v));
    outcome(
        mismatches.is_empty() && spot,
        format!("{cells} cells and {} bold entries checked; mismatches: {:?}", BOLD.len(), mismatches),
    )
}

// ---- 10 --------------------------------------------------------------------

const GOLDEN_CHECKPOINT: &str = "28b331774e38670be4b555092dfdcadeb46e540126e9b787372184749125156b";
const GOLDEN_RECORD: &str = "77a2ea6f955b2ea0097bd0782e78c5e05278ebf9a85128f71d114c7ef9fba99c";
const GOLDEN_CSV: &str = "8503f8417d33aa618a380c2bd64a64c7d7be2606df645efa0d8eec704a2526c6";

fn small_config(kind: StrategyKind) -> ExperimentConfig {
    let mut pre = PretrainConfig::desk();
    pre.corpus = TaskSpec::new(8, 8, 0.1, 3);
    pre.steps = 10;
    pre.batch_classes = 8;
    pre.learning_rate = 1e-3;
    let mut cf = TaskSpec::new(4, 10, 0.1, 6);
    cf.first_class = 4;
    ExperimentConfig {
        pretrain: pre,
        strategy: StrategyBlock::of(kind),
        train: TaskRef {
            name: "small".into(),
            task: TaskSpec::new(4, 10, 0.1, 4),
            few_shot: None,
        },
        dg_eval: vec![ShiftRef {
            name: "small-shift".into(),
            sigma: 0.3,
            seed: 5,
        }],
        cf_eval: vec![TaskRef {
            name: "small-cf".into(),
            task: cf,
            few_shot: None,
        }],
        epochs: 2,
        batch_size: 16,
        lr: Some(1e-3),
        momentum: 0.9,
        weight_decay: 1e-5,
        seed: 7,
    }
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn criterion_10() -> Outcome {
    let configs: Vec<ExperimentConfig> = [StrategyKind::BitFit, StrategyKind::Lora, StrategyKind::Adapter]
        .into_iter()
        .map(small_config)
        .collect();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut digests = Vec::new();
    for dir in &dirs {
        let out = sweep(&configs, 1, Some(dir.path())).unwrap();
        assert!(out.failures.is_empty());
        let hash = &configs[0].hash();
        let run = dir.path().join(hash);
        let ckpt = std::fs::read_dir(&run)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|x| x == "dep1"))
            .unwrap();
        digests.push((
            sha(&std::fs::read(ckpt).unwrap()),
            sha(&std::fs::read(run.join("record.json")).unwrap()),
            sha(out.csv().unwrap().as_bytes()),
        ));
    }
    let same = digests[0] == digests[1];
    let (c, r, v) = &digests[0];
    let golden = [(c, GOLDEN_CHECKPOINT), (r, GOLDEN_RECORD), (v, GOLDEN_CSV)];
    let golden_ok = golden.iter().all(|(got, want)| got.as_str() == *want);
    let shown = |h: &str| if golden_ok { h[..12].to_string() } else { h.to_string() };
    outcome(
        same && golden_ok,
        format!(
            "reruns identical: {same}, golden match: {golden_ok}; checkpoint {}, record {}, csv {}",
            shown(c),
            shown(r),
            shown(v)
        ),
    )
}

fn main() {
    let start = Instant::now();
    if std::env::args().any(|a| a == "--golden-only") {
        let o = criterion_10();
        println!("criterion 10: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        return;
    }
    let mut results: Vec<(u32, Outcome)> = vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3())];
    let t = Instant::now();
    let zs = pretrain(&PretrainConfig::desk()).unwrap().params;
    let pretrain_time = t.elapsed();
    results.push((4, criterion_4(&zs)));
    results.push((5, criterion_5(&zs)));
    let runs = desk_runs(&zs, pretrain_time);
    results.push((6, criterion_6(&runs)));
    results.push((7, criterion_7(&runs)));
    results.push((8, criterion_8()));
    results.push((9, criterion_9()));
    results.push((10, criterion_10()));
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n:>2}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed in {:.1?}", results.len() - failed, start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
