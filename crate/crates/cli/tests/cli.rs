use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokfilter")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn read(path: &str) -> String {
    std::fs::read_to_string(Path::new(path)).unwrap()
}

#[test]
fn generate_zero_steps() {
    let out = ok(&["generate", "--steps", "0", "--prompt-bytes", "AB"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("65 66"));
    assert!(lines.next().unwrap().starts_with("layer,"));
    assert!(lines.all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn generate_is_deterministic() {
    let args = ["generate", "--steps", "16", "--seed", "3", "--p-global", "0.3"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}

#[test]
fn zero_budget_generates_dense_tokens() {
    let dense = ok(&["generate", "--steps", "20", "--mode", "dense"]);
    let filt = ok(&["generate", "--steps", "20", "--p-global", "0"]);
    assert_eq!(dense.lines().next(), filt.lines().next());
}

#[test]
fn record_then_replay_round_trip() {
    let dir = TempDir::new().unwrap();
    let (trace, live, replayed) = (p(&dir, "t.ndjson"), p(&dir, "live.csv"), p(&dir, "replay.csv"));
    ok(&["generate", "--steps", "24", "--record", &trace, "--summary", &live]);
    ok(&["replay", "--trace", &trace, "--summary", &replayed, "--verify-attention"]);
    assert_eq!(read(&live), read(&replayed));
}

#[test]
fn synth_validates_pattern_and_handles_zero_steps() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "s.ndjson");
    assert_eq!(code(&["synth", "--pattern", "zipf", "--out", &out]), 2);
    ok(&["synth", "--pattern", "random", "--steps", "0", "--out", &out]);
    let text = read(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"header\""));
}

#[test]
fn config_and_usage_errors_exit_2() {
    assert_eq!(code(&["generate", "--bogus"]), 2);
    assert_eq!(code(&["generate", "--p-global", "2"]), 2);
    assert_eq!(code(&["generate", "--p-global", "0.5", "--tail-fraction", "0.4"]), 2);
    assert_eq!(code(&["replay", "--trace", "/nonexistent/t.ndjson"]), 1);
}

#[test]
fn one_cell_sweep_equals_replay() {
    let dir = TempDir::new().unwrap();
    let trace = p(&dir, "t.ndjson");
    ok(&["synth", "--pattern", "repetitive", "--steps", "64", "--out", &trace]);
    let single = ok(&["replay", "--trace", &trace, "--gamma", "0.8"]);
    let sweep = ok(&["sweep", "--trace", &trace, "--grid", "gamma=0.8"]);
    let global = single.lines().find(|l| l.starts_with("all,")).unwrap();
    let g: Vec<&str> = global.split(',').collect();
    let row: Vec<&str> = sweep.lines().nth(1).unwrap().split(',').collect();
    // cell,gamma,status,eligible,skipped,skip_ratio,mean_s_kv,mean_alpha,mass_lost,flops_saved
    assert_eq!(row[2], "ok");
    assert_eq!(&row[3..], &g[1..]);
}

#[test]
fn sweep_grid_rows_and_invalid_cells() {
    let dir = TempDir::new().unwrap();
    let trace = p(&dir, "t.ndjson");
    ok(&["synth", "--pattern", "random", "--steps", "32", "--out", &trace]);
    let out = ok(&["sweep", "--trace", &trace, "--grid", "gamma=0.8,0.9,0.95;focus=tail,head,uniform"]);
    assert_eq!(out.lines().count(), 10);
    let out = ok(&["sweep", "--trace", &trace, "--grid", "Y=0.4,0.5;p_global=0.5"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(rows[0].contains("invalid"));
    assert!(rows[1].contains(",ok,"));
    assert_eq!(code(&["sweep", "--trace", &trace, "--grid", "bogus=1"]), 2);
}

#[test]
fn report_identity_merge_and_errors() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    std::fs::write(&a, "layer,skip_ratio\nall,0.25\n").unwrap();
    std::fs::write(&b, "layer,skip_ratio\nall,0.5\n").unwrap();
    assert_eq!(ok(&["report", "--inputs", &a]), read(&a));
    let merged = ok(&["report", "--inputs", &a, &b]);
    assert_eq!(merged, "source,layer,skip_ratio\na,all,0.25\nb,all,0.5\n");

    let c = p(&dir, "c.csv");
    std::fs::write(&c, "layer,mass_lost\nall,0.1\n").unwrap();
    assert_eq!(code(&["report", "--inputs", &a, &c]), 2);

    let bad = p(&dir, "bad.csv");
    std::fs::write(&bad, "layer,skip_ratio\nall,0.25\nall,0.5,extra\n").unwrap();
    let o = run(&["report", "--inputs", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}
