use std::path::Path;
use std::process::{Command, Output};

use alignpeft::alignment::{write_embeddings, EmbeddingSet, Modality};
use alignpeft::tensor::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_alignpeft");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ALIGNPEFT_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_pretrain() -> serde_json::Value {
    serde_json::json!({
        "corpus": {"classes": 8, "samples_per_class": 8, "noise": 0.1, "seed": 3},
        "steps": 10,
        "batch_classes": 8,
        "learning_rate": 1e-3,
        "seed": 2
    })
}

fn tiny_experiment(kind: &str, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "pretrain": tiny_pretrain(),
        "strategy": {"kind": kind},
        "train": {"name": "t", "task": {"classes": 4, "samples_per_class": 10, "noise": 0.1, "seed": 4}},
        "dg_eval": [{"name": "t-shift", "sigma": 0.3, "seed": 5}],
        "cf_eval": [{"name": "cf", "task": {"classes": 4, "samples_per_class": 10, "noise": 0.1, "seed": 6, "first_class": 4}}],
        "epochs": 2,
        "batch_size": 16,
        "lr": 1e-3,
        "seed": seed
    })
}

#[test]
fn help_exits_zero_everywhere() {
    assert!(run(&["--help"]).status.success());
    for sub in ["pretrain", "finetune", "sweep", "measure", "stats", "report", "validate"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn measure_two_plus_two_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.emb1");
    let txt = dir.path().join("txt.emb1");
    let set = |rows: Vec<f64>, m| EmbeddingSet::new(Tensor::new(vec![2, 2], rows).unwrap(), m, vec![0, 1]).unwrap();
    write_embeddings(&set(vec![0.0, 0.0, 0.0, 1.0], Modality::Image), &img, &[]).unwrap();
    write_embeddings(&set(vec![10.0, 0.0, 10.0, 1.0], Modality::Text), &txt, &[]).unwrap();
    let o = run(&["measure", "--images", img.to_str().unwrap(), "--texts", txt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let ss: f64 = out.lines().find_map(|l| l.strip_prefix("ss ")).unwrap().parse().unwrap();
    let b = (10.0 + 101f64.sqrt()) / 2.0;
    assert!((ss - (b - 1.0) / b).abs() < 1e-9);
    assert!((ss - 0.900247).abs() < 5e-6);
    assert!(out.contains("acs n/a"));

    // shifted off the origin every vector has a norm, so ACS is defined and ss unchanged
    write_embeddings(&set(vec![1.0, 0.0, 1.0, 1.0], Modality::Image), &img, &[]).unwrap();
    write_embeddings(&set(vec![11.0, 0.0, 11.0, 1.0], Modality::Text), &txt, &[]).unwrap();
    let o = run(&["measure", "--images", img.to_str().unwrap(), "--texts", txt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let shifted: f64 = out.lines().find_map(|l| l.strip_prefix("ss ")).unwrap().parse().unwrap();
    assert!((shifted - ss).abs() < 1e-12);
    let acs: f64 = out.lines().find_map(|l| l.strip_prefix("acs ")).unwrap().parse().unwrap();
    let cos = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
    assert!((acs - 0.5 * (cos([1.0, 0.0], [11.0, 0.0]) + cos([1.0, 1.0], [11.0, 1.0]))).abs() < 1e-12);
}

#[test]
fn missing_files_exit_two_naming_the_path() {
    let o = run(&["measure", "--images", "/no/such/a.emb1", "--texts", "/no/such/b.emb1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/a.emb1"));
    let o = run(&["validate", "--config", "/no/such/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/config.json"));
    let o = run(&["report", "--input", "/no/such/table.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/table.csv"));
}

#[test]
fn validate_fills_table_learning_rates() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, lr) in [("BitFit", 1e-3), ("Full", 2e-5)] {
        let mut cfg = tiny_experiment(kind, 0);
        cfg.as_object_mut().unwrap().remove("lr");
        let path = write(&dir.path().join(format!("{kind}.json")), &cfg.to_string());
        let o = run(&["validate", "--config", &path]);
        assert!(o.status.success(), "{}", stderr(&o));
        let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(doc["config"]["lr"].as_f64(), Some(lr));
        assert_eq!(doc["hash"].as_str().unwrap().len(), 16);
        assert_eq!(doc["mask"]["strategy"].as_str().unwrap(), kind);
    }
}

#[test]
fn bad_configs_exit_two_with_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment("BitFit", 0);
    cfg["strategy"]["lora_rank"] = 4.into();
    let path = write(&dir.path().join("rank.json"), &cfg.to_string());
    let o = run(&["validate", "--config", &path]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lora_rank"), "{}", stderr(&o));

    let mut cfg = tiny_experiment("Full", 0);
    cfg["train"]["task"]["clases"] = 3.into();
    let path = write(&dir.path().join("typo.json"), &cfg.to_string());
    let o = run(&["finetune", "--config", &path]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.task.clases"), "{}", stderr(&o));
}

#[test]
fn report_is_byte_identical_and_honours_the_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let flag_out = dir.path().join("flag");
    let env_out = dir.path().join("env");
    let o = Command::new(BIN)
        .args(["report", "--out", flag_out.to_str().unwrap()])
        .env("ALIGNPEFT_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!flag_out.exists());
    let plot = std::fs::read(env_out.join("plot.json")).unwrap();
    let again = dir.path().join("again");
    let o2 = run(&["report", "--out", again.to_str().unwrap()]);
    assert_eq!(o.stdout, o2.stdout);
    assert_eq!(plot, std::fs::read(again.join("plot.json")).unwrap());
    let text = stdout(&o);
    for needle in ["+20.25", "-39.58 forgetting", "+12.88", "79.12", "16.61", "51.89"] {
        assert!(text.contains(needle), "{needle}");
    }
}

#[test]
fn report_schema_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(&dir.path().join("x.csv"), "train_set,method,accuracy\nt,Full,0.5\n");
    let o = run(&["report", "--input", &path]);
    assert_eq!(o.status.code(), Some(2));
    let path = write(&dir.path().join("t.csv"), "data,ZS,Full\nx,50.00,61.25\n");
    assert_eq!(run(&["report", "--input", &path]).status.code(), Some(2));
    let o = run(&["report", "--input", &path, "--schema", "DG"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("+11.25"));
}

#[test]
fn stats_regresses_a_measure_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("run_id,measure,value,accuracy\n");
    for i in 1..=6 {
        csv += &format!("r{i},ss,{},{}\n", i as f64, 2.0 * i as f64 + 1.0);
        csv += &format!("r{i},acs,{},{}\n", 0.1 * i as f64, 0.3);
    }
    let path = write(&dir.path().join("m.csv"), &csv);
    let o = run(&["stats", "--input", &path, "--measure", "ss"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((r["slope"].as_f64().unwrap() - 2.0).abs() < 1e-10);
    assert!((r["intercept"].as_f64().unwrap() - 1.0).abs() < 1e-10);
    let o = run(&["stats", "--input", &path, "--measure", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_finetune_sweep_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap();
    let pcfg = write(&dir.path().join("p.json"), &tiny_pretrain().to_string());
    let o = run(&["pretrain", "--config", &pcfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = stdout(&o).trim().to_string();
    assert!(Path::new(&ckpt).exists());

    let ecfg = write(&dir.path().join("e.json"), &tiny_experiment("BitFit", 1).to_string());
    let o = run(&["finetune", "--config", &ecfg, "--zs", &ckpt, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let hash = record["config_hash"].as_str().unwrap();
    assert!(out.join(hash).join("record.json").exists());
    let o2 = run(&["finetune", "--config", &ecfg, "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.stdout, o2.stdout, "pretraining inline matches the saved checkpoint");

    let list = serde_json::Value::Array(vec![tiny_experiment("ZeroShot", 1), tiny_experiment("LoRA", 1), tiny_experiment("Full", 1)]);
    let scfg = write(&dir.path().join("s.json"), &list.to_string());
    let o = run(&["sweep", "--config", &scfg, "--jobs", "2", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = out.join("results.csv");
    let csv = std::fs::read_to_string(&results).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    let o = run(&["report", "--input", results.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| ID | t | Full | 1 |"));
}
