use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pearl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pearl")).args(args).current_dir(cwd).output().expect("spawn pearl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, out: &str, seed: &str) {
    let o = pearl(
        &["gen-data", "--regime", "single_single", "--n-train", "24", "--n-eval-easy", "6", "--n-eval-hard", "4"]
            .iter()
            .copied()
            .chain(["--seed", seed, "--out", out])
            .collect::<Vec<_>>(),
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tiny_config(dir: &Path) {
    let cfg = serde_json::json!({
        "steps": 3,
        "batch_size": 2,
        "lr": 0.001,
        "eval_every": 2,
        "train_path": "data/train.jsonl",
        "eval_path": "data/eval_easy.jsonl",
        "checkpoint_dir": "run",
        "model": { "d_model": 16, "n_heads": 2, "n_layers": 1, "max_seq": 256 }
    });
    fs::write(dir.join("cfg.json"), cfg.to_string()).unwrap();
}

#[test]
fn gen_data_writes_three_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a", "7");
    gen(dir.path(), "b", "7");
    for f in ["train.jsonl", "eval_easy.jsonl", "eval_hard.jsonl", "run.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
    let run: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["regime"], "single_single");
    assert_eq!(fs::read_to_string(dir.path().join("a/train.jsonl")).unwrap().lines().count(), 24);
}

#[test]
fn usage_errors_exit_1_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = pearl(&["gen-data", "--out", "x", "--bogus-flag", "3"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--bogus-flag"));
    assert_eq!(code(&pearl(&["no-such-command"], dir.path())), 1);
    assert_eq!(code(&pearl(&["gen-data", "--regime", "triple", "--out", "x"], dir.path())), 1);
    assert_eq!(code(&pearl(&["train", "--lambda", "-0.5"], dir.path())), 1);
    assert_eq!(code(&pearl(&["--help"], dir.path())), 0);
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"lamda": 0.2}"#).unwrap();
    let o = pearl(&["train", "--config", "cfg.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lamda"));
}

#[test]
fn train_then_eval_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "data", "3");
    tiny_config(d);
    let o = pearl(&["train", "--config", "cfg.json", "--mode", "pearl", "--seed", "5"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.json", "metrics.csv", "eval_log.csv", "best.ckpt", "last.ckpt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let run: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config"]["mode"], "pearl");
    assert_eq!(run["config"]["lambda"], 0.2);
    assert_eq!(run["config"]["model"]["d_model"], 16);

    let o = pearl(&["eval", "--ckpt", "run/best.ckpt", "--bench", "data/eval_hard.jsonl"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("run/eval/eval_hard_direct.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,regime,gold,predicted,correct"));
    assert_eq!(csv.lines().count(), 5);
    let rep: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("run/eval/eval_hard_direct.json")).unwrap()).unwrap();
    assert_eq!(rep["n"], 4);

    let o = pearl(&["sweep-steps", "--ckpt", "run/last.ckpt", "--bench", "data/eval_easy.jsonl", "--ks", "1,2"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = fs::read_to_string(d.join("run/sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().collect::<Vec<_>>()[0], "k,accuracy,n_eval");
    assert_eq!(sweep.lines().count(), 3);

    // resuming to a later step appends to the same logs
    let o = pearl(&["train", "--resume", "run/last.ckpt", "--steps", "5"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn projection_needs_two_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "data", "3");
    let o = pearl(
        &["gen-data", "--regime", "single_multi", "--n-train", "2", "--n-eval-easy", "6", "--n-eval-hard", "1"]
            .iter()
            .copied()
            .chain(["--out", "data2"])
            .collect::<Vec<_>>(),
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    tiny_config(d);
    assert_eq!(code(&pearl(&["train", "--config", "cfg.json", "--steps", "1", "--eval-every", "0"], d)), 0);

    let o = pearl(&["project-embeddings", "--ckpt", "run/last.ckpt", "--bench", "data/eval_easy.jsonl"], d);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = pearl(
        &["project-embeddings", "--ckpt", "run/last.ckpt", "--bench", "data/eval_easy.jsonl", "data2/eval_easy.jsonl"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let points = fs::read_to_string(d.join("run/projection/points.csv")).unwrap();
    assert_eq!(points.lines().next(), Some("x,y,view,task"));
    assert_eq!(points.lines().count(), 1 + 2 * 12);
    let sil: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("run/projection/silhouette.json")).unwrap()).unwrap();
    assert!(sil["silhouette_input"].as_f64().unwrap().abs() <= 1.0);
}

#[test]
fn data_and_format_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = pearl(&["eval", "--ckpt", "junk.ckpt", "--bench", "missing.jsonl"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte 0"), "{}", stderr(&o));
    let o = pearl(&["train", "--train", "missing.jsonl", "--eval-every", "0"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "data", "3");
    tiny_config(d);
    let o = pearl(&["train", "--config", "cfg.json", "--lr", "1e300", "--steps", "4", "--eval-every", "0"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pearl(&["gradcheck", "--coords", "1", "--out", "gc"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["passed"] == true));
}
