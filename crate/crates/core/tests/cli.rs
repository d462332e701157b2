//! End-to-end runs of the `chunkppo` binary.

use std::path::Path;
use std::process::{Command, Output};

fn chunkppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkppo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SHORT: [&str; 10] = [
    "--set",
    "total_steps=200",
    "--set",
    "warmup_steps=50",
    "--set",
    "eval_episodes=8",
    "--set",
    "eval_interval=2",
    "--set",
    "rollout_macro_steps=64",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--seed", "3", "--out-dir", p(dir)];
    args.extend_from_slice(&SHORT);
    args.extend_from_slice(extra);
    chunkppo(&args)
}

#[test]
fn collect_demos_writes_successful_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demos.jsonl");
    let o = chunkppo(&[
        "collect-demos",
        "--task",
        "sparse-reach",
        "--n",
        "10",
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("successes: 10/10"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["success"], true);
        assert_eq!(v["source"], "expert");
    }
}

#[test]
fn collect_zero_demos_warns_and_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("none.jsonl");
    let o = chunkppo(&[
        "collect-demos",
        "--task",
        "sparse-push",
        "--n",
        "0",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("zero demonstrations"));
    assert_eq!(std::fs::read(&out).unwrap().len(), 0);
}

#[test]
fn unknown_task_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = chunkppo(&[
        "collect-demos",
        "--task",
        "sparse-fly",
        "--n",
        "1",
        "--seed",
        "1",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert!(!o.status.success());
}

#[test]
fn malformed_config_lists_every_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(
        &cfg,
        "lr = fast\nwidget = 3\ngamma = 0.99\nhorizon = 0\nno equals sign here\n",
    )
    .unwrap();
    let o = chunkppo(&[
        "train",
        "--seed",
        "1",
        "--config",
        p(&cfg),
        "--out-dir",
        p(&dir.path().join("run")),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    for key in ["lr", "widget", "horizon", "line 5"] {
        assert!(err.contains(key), "missing `{key}` in: {err}");
    }
}

#[test]
fn train_is_reproducible_and_eval_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = train(d, &["--set", "task=sparse-latch"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("task = sparse-latch"));
        assert!(stdout(&o).contains("final: acc"));
    }
    for f in [
        "metrics.csv",
        "config.txt",
        "checkpoint.bin",
        "final_eval.json",
        "buffer.jsonl",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "update_idx,env_steps,beta,ppo_loss,bc_loss,value_loss,buffer_size,eval_acc,eval_len_p10,eval_avg10\n"
    ));

    let ckpt = a.join("checkpoint.bin");
    let eval = |episodes: &str| chunkppo(&["eval", "--checkpoint", p(&ckpt), "--episodes", episodes, "--seed", "42"]);
    let (e1, e2) = (eval("16"), eval("16"));
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);
    let single: serde_json::Value = serde_json::from_slice(&eval("1").stdout).unwrap();
    assert_eq!(single["n_episodes"], 1);
    assert_eq!(single["lengths"].as_array().unwrap().len(), 1);
    assert_eq!(single["task"], "sparse-latch");

    let plot = dir.path().join("plot.csv");
    let o = chunkppo(&[
        "plot-data",
        "--metrics",
        p(&a.join("metrics.csv")),
        "--out",
        p(&plot),
        "--window",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(&plot).unwrap();
    assert!(rows.starts_with("update_idx,env_steps,eval_acc,smoothed_acc\n"));
    assert!(rows.lines().count() >= 2);
}

#[test]
fn ablations_and_presets_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(
        &dir.path().join("c"),
        &["--ablation", "chunking_off", "--ablation", "buffer_unfiltered"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(dir.path().join("c").join("config.txt")).unwrap();
    assert!(cfg.contains("chunking_off = true"));
    assert!(cfg.contains("buffer_unfiltered = true"));

    let o = chunkppo(&[
        "train",
        "--preset",
        "paper",
        "--seed",
        "1",
        "--out-dir",
        p(&dir.path().join("p")),
        "--set",
        "total_steps=16",
        "--set",
        "rollout_macro_steps=16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = stdout(&o);
    for line in [
        "lr = 0.00001",
        "lambda = 0.95",
        "gamma = 0.99",
        "epsilon = 0.2",
        "value_weight = 0.5",
        "entropy_weight = 0",
        "horizon = 4",
        "warmup_steps = 40000",
        "batch_size = 16",
    ] {
        assert!(echo.contains(line), "missing `{line}` in echo");
    }
}

#[test]
fn train_from_demo_file() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos.jsonl");
    let o = chunkppo(&[
        "collect-demos",
        "--task",
        "sparse-push",
        "--n",
        "12",
        "--seed",
        "2",
        "--out",
        p(&demos),
    ]);
    assert!(o.status.success());
    let run = dir.path().join("run");
    let o = train(&run, &["--set", "task=sparse-push", "--demos", p(&demos)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let buffer = std::fs::read_to_string(run.join("buffer.jsonl")).unwrap();
    assert!(buffer.lines().count() >= 10);

    let o = train(
        &dir.path().join("wrong"),
        &["--set", "task=sparse-reach", "--demos", p(&demos)],
    );
    assert!(!o.status.success());
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "lr=1e300"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diverged"));
}
