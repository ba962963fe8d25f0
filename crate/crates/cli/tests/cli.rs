use std::path::Path;
use std::process::{Command, Output};

use dps_core::TrainConfig;

fn dps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dps"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dps(args);
    assert!(
        out.status.success(),
        "dps {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut c = TrainConfig::smoke();
    c.total_steps = 12;
    c.warmup_steps = 2;
    c.eval_every = 6;
    c.eval_probe_per_task = 1;
    c.eval_per_task = 2;
    c.batch_size = 2;
    c.backbone.steps = 4;
    c.out_dir = dir.join("default-out");
    let path = dir.join("cfg.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

#[test]
fn config_profiles_print_parseable_toml() {
    let text = ok(&["config", "--profile", "full"]);
    let cfg = TrainConfig::from_toml(&text).unwrap();
    assert_eq!((cfg.pool_size, cfg.prompt_size, cfg.total_steps), (400, 160, 90_000));
    assert!(!dps(&["config", "--profile", "nope"]).status.success());
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let csv = ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--strategy",
        "dps-attn",
        "--stochastic",
        "--pool-size",
        "12",
        "--prompt-size",
        "5",
        "--seed",
        "3",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(csv.starts_with("task,n,exact_match,token_error_rate,rouge_l\n"));
    let written = TrainConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(written.effective_strategy().to_string(), "dps-attn-stochastic");
    assert_eq!((written.pool_size, written.prompt_size, written.seed), (12, 5, 3));
    let ck = run.join("final.ckpt");
    for f in ["metrics.jsonl", "eval.jsonl", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let eval_dir = dir.path().join("eval");
    let at5 = ok(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--k-infer",
        "5",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    // evaluation of the saved checkpoint reproduces the end-of-training table
    assert_eq!(at5, std::fs::read_to_string(run.join("metrics.csv")).unwrap());
    assert!(eval_dir.join("metrics_k5.csv").exists());
    let bad = dps(&["eval", "--checkpoint", ck.to_str().unwrap(), "--k-infer", "13"]);
    assert!(!bad.status.success());

    let an = dir.path().join("analysis");
    let summary = ok(&[
        "analyze",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--k-infer",
        "4",
        "--out",
        an.to_str().unwrap(),
    ]);
    assert!(summary.starts_with("distinct_tokens_total,"));
    for f in ["usage.csv", "jaccard.csv", "summary.json"] {
        assert!(an.join(f).exists(), "{f} missing");
    }
}

#[test]
fn analyze_rejects_non_pool_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("lora");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--strategy",
        "lora",
        "--out",
        run.to_str().unwrap(),
    ]);
    let out = dps(&[
        "analyze",
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
        "--k-infer",
        "4",
        "--out",
        dir.path().join("a").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pool strategy"));
}

#[test]
fn invalid_overrides_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dps(&["train", "--config", cfg.to_str().unwrap(), "--prompt-size", "99"]);
    assert!(!out.status.success());
    let out = dps(&["train", "--config", cfg.to_str().unwrap(), "--strategy", "lora", "--stochastic"]);
    assert!(!out.status.success());
    let out = dps(&["train", "--config", cfg.to_str().unwrap(), "--strategy", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn dataset_dump_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let text = ok(&["dataset", "--config", cfg.to_str().unwrap(), "--per-task", "2", "--seed", "4"]);
    assert_eq!(text.lines().count(), 12);
    assert_eq!(text, ok(&["dataset", "--config", cfg.to_str().unwrap(), "--per-task", "2", "--seed", "4"]));
}
