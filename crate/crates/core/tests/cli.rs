use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use v2x_rrm::harness::{read_results, RESULT_COLUMNS};
use v2x_rrm::neural::{read_checkpoint, write_checkpoint};

const SMALL: &str = r#"{
    "schema_version": 1,
    "scenario": {"pairs": 4},
    "agent": {"batch_size": 4, "lstm_hidden": 6, "dense_hidden": [6], "checkpoint_interval": 50},
    "run": {"train_epochs": 120, "eval_epochs": 40, "seeds": [1, 2]}
}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.json");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_v2x-rrm")).args(args).arg("--config").arg(&config).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn train_then_evaluate_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(cli(tmp.path(), &["train", "--seed", "9", "--out", run.to_str().unwrap()]));

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,loss,avg_cost,avg_queue,avg_power_w,epsilon"));
    assert_eq!(lines.count(), 120);
    assert!(run.join("checkpoint_0000050.bin").exists() && run.join("checkpoint_0000100.bin").exists());
    assert_eq!(fs::read_to_string(run.join("loss_vs_epoch.csv")).unwrap().lines().count(), 121);

    // The checkpoint survives a read and rewrite byte for byte.
    let bytes = fs::read(run.join("checkpoint.bin")).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&read_checkpoint(bytes.as_slice()).unwrap(), &mut again).unwrap();
    assert_eq!(bytes, again);

    let eval = tmp.path().join("eval");
    let ckpt = run.join("checkpoint.bin");
    ok(cli(tmp.path(), &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--trajectory", "--out", eval.to_str().unwrap()]));
    let rows = read_results(fs::File::open(eval.join("results.csv")).unwrap()).unwrap();
    // Two seeds, the agent plus three baselines.
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.config_hash.len() == 64 && !r.build_id.is_empty()));
    assert_eq!(rows.iter().filter(|r| r.policy == "lstm_drl").count(), 2);
    let traj = fs::read_to_string(eval.join("trajectory_lstm_drl_1.csv")).unwrap();
    assert!(traj.starts_with("epoch,pair,group,queue,channel,departures,power_w,cost\n"));
    assert_eq!(traj.lines().count(), 1 + 40 * 4);
}

#[test]
fn sweep_writes_figure_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = ok(cli(
        tmp.path(),
        &["sweep", "--axis", "arrival-rate", "--values", "0.5,1", "--seed", "4", "--out", out.to_str().unwrap()],
    ));
    assert!(String::from_utf8_lossy(&o.stdout).contains("queue_aware"));
    let header = fs::read_to_string(out.join("results.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, RESULT_COLUMNS.join(","));
    let fig = fs::read_to_string(out.join("cost_vs_arrival_rate.csv")).unwrap();
    // Header plus four policies at two rates.
    assert_eq!(fig.lines().count(), 1 + 8);
    assert_eq!(fs::read_to_string(out.join("loss_vs_epoch.csv")).unwrap().lines().count(), 1 + 2 * 120);
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().starts_with("policy,axis,value,seeds,mean_cost,std_cost"));
}

#[test]
fn invalid_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 1, "scenario": {"channels": 0, "groups": 50}, "agent": {"epsilon": 2.0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_v2x-rrm"))
        .args(["evaluate", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("channels") && err.contains("groups") && err.contains("epsilon"), "{err}");
}

#[test]
fn missing_schema_version_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"run": {"seeds": [1]}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_v2x-rrm"))
        .args(["oracle", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

#[test]
fn gradcheck_passes_and_reports_every_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    ok(cli(tmp.path(), &["gradcheck", "--out", out.to_str().unwrap()]));
    let text = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    // LSTM input, recurrent, bias; one dense layer; head; for two loss forms.
    assert_eq!(text.lines().count(), 1 + 2 * 7);
}
