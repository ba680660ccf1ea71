use std::path::Path;
use std::process::{Command, Output};

use lamp_core::config::{ExperimentConfig, CHECKPOINT_FILE, COST_FILE, METRICS_FILE};
use lamp_core::prompt::{Method, PoolConfig};
use lamp_core::trainer::MetricsLog;
use serde_json::Value;

fn lamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamp")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.d = 16;
    cfg.backbone.n_heads = 2;
    cfg.backbone.ffn_width = 32;
    cfg.prompt.l = 12;
    cfg.prompt.r = 3;
    cfg.task.n_train = 24;
    cfg.task.n_eval = 16;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out_dir = dir.path().join("run");
    let out = lamp(&["--config", &cfg, "--out", out_dir.to_str().unwrap(), "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [METRICS_FILE, CHECKPOINT_FILE, COST_FILE] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let log = MetricsLog::from_ndjson(&std::fs::read_to_string(out_dir.join(METRICS_FILE)).unwrap()).unwrap();
    // Epoch 0 is the evaluation before training, for both splits.
    assert_eq!(log.records.len(), (2 + 1) * 2);
    let cost = stdout_json(&out);
    assert_eq!(cost["trainable_params"], 12 * 3 + 3 + 3 * 16);
}

#[test]
fn indivisible_pool_block_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.prompt.l = 100;
    cfg.prompt.pooling = PoolConfig::average(3);
    let path = write_config(dir.path(), &cfg);
    let out = lamp(&["--config", &path, "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("prompt.pooling.p") && err.contains("prompt.l"), "{err}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(&small_config().to_json()).unwrap();
    v["train"]["lr"] = 0.1.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = lamp(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lamp(&["--config", "/nonexistent/cfg.json", "train"]).status.code(), Some(2));
    assert_eq!(lamp(&["train"]).status.code(), Some(2));
}

#[test]
fn count_params_reports_table_values() {
    let out = lamp(&["count-params", "--l", "100", "--d", "1024", "--r", "8"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["trainable_params"], 9000);
    assert_eq!(v["pt_params"], 102_400);
    assert_eq!(v["ratio"], 11.38);

    let v = stdout_json(&lamp(&["count-params", "--l", "500", "--d", "4096", "--r", "8"]));
    assert_eq!(v["trainable_params"], 36_776);

    let v = stdout_json(&lamp(&["count-params", "--l", "100", "--d", "64", "--r", "8", "--p", "4", "--m", "8"]));
    assert_eq!(v["prompt_rows_fed_to_model"], 25);
    assert_eq!(v["attention_cost_units"], (25 + 8) * (25 + 8) * 64);

    let v = stdout_json(&lamp(&["count-params", "--l", "100", "--d", "512", "--r", "8", "--method", "vanilla-pt"]));
    assert_eq!(v["trainable_params"], 51_200);
}

#[test]
fn count_params_rejects_bad_arguments() {
    for args in [
        vec!["count-params", "--l", "100", "--d", "64", "--r", "0"],
        vec!["count-params", "--l", "100", "--d", "64", "--r", "65"],
        vec!["count-params", "--l", "100", "--d", "64", "--r", "8", "--p", "3"],
        vec!["count-params", "--l", "100", "--d", "64", "--r", "8", "--method", "lora"],
        vec!["count-params", "--l", "100"],
    ] {
        assert_eq!(lamp(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bench_reports_pooled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.prompt.l = 100;
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("bench");
    let out = lamp(&[
        "--config",
        &path,
        "--out",
        out_dir.to_str().unwrap(),
        "bench",
        "--pool-blocks",
        "1,2,4",
        "--iters",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = stdout_json(&out);
    let fed: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["prompt_rows"].as_u64().unwrap()).collect();
    assert_eq!(fed, vec![100, 50, 25]);
    assert!(out_dir.join("bench.json").is_file());

    assert_eq!(lamp(&["--config", &path, "bench", "--pool-blocks"]).status.code(), Some(2));
    assert_eq!(lamp(&["--config", &path, "bench", "--pool-blocks", "3"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.prompt.pooling = PoolConfig::self_attention(3);
    let path = write_config(dir.path(), &cfg);
    let out = lamp(&["--config", &path, "gradcheck", "--coords", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let names: Vec<String> = stdout_json(&out)["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["name"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(names.len(), 4, "{names:?}");
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config());
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = lamp(&["--config", &path, "--seed", seed, "--out", out_dir.to_str().unwrap(), "train"]);
        assert!(out.status.success());
        std::fs::read(out_dir.join(CHECKPOINT_FILE)).unwrap()
    };
    let a = run("1", "a");
    let b = run("1", "b");
    let c = run("2", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn decompose_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = lamp(&["--out", d, "decompose", "--l", "10", "--d", "6", "--r", "2", "--vocab-size", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["trainable_params"], 10 * 2 + 2 + 2 * 6);

    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let csv = dir.path().join("tokens.csv");
    let out = lamp(&["export", ckpt.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = stdout_json(&out);
    assert!(stats["numerical_rank"].as_u64().unwrap() <= 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split(',').count() == 6));

    assert_eq!(lamp(&["--out", d, "decompose", "--l", "10", "--d", "6", "--r", "7"]).status.code(), Some(2));
    assert_eq!(lamp(&["--out", d, "decompose", "--l", "10", "--r", "2"]).status.code(), Some(2));
    assert_eq!(
        lamp(&["--out", d, "decompose", "--l", "10", "--d", "6", "--r", "2", "--mode", "sideways"]).status.code(),
        Some(2)
    );
}

#[test]
fn export_of_trained_vanilla_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.prompt.method = Method::VanillaPt;
    let path = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    assert!(lamp(&["--config", &path, "--out", run.to_str().unwrap(), "train"]).status.success());
    let out = lamp(&["--out", run.to_str().unwrap(), "export", run.join(CHECKPOINT_FILE).to_str().unwrap()]);
    assert!(out.status.success());
    assert!(run.join("embeddings.csv").is_file());
    assert!(stdout_json(&out)["mean_pairwise_distance"].as_f64().unwrap() > 0.0);
}
