use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn coordet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coordet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = coordet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_synth(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "synth",
            "--normal",
            "30",
            "--coord",
            "8",
            "--sequences",
            "80",
            "--seed",
            seed,
        ],
    );
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn detect(dir: &Path, run: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "detect",
        "--input",
        "synth.jsonl",
        "--preset",
        "compact",
        "--labels",
        "labels.csv",
        "--run-dir",
        run,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(run)
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    small_synth(tmp.path(), "3");
    let first = fs::read(tmp.path().join("synth.jsonl")).unwrap();
    small_synth(tmp.path(), "3");
    assert_eq!(first, fs::read(tmp.path().join("synth.jsonl")).unwrap());
    small_synth(tmp.path(), "4");
    assert_ne!(first, fs::read(tmp.path().join("synth.jsonl")).unwrap());
    let labels = read_csv(&tmp.path().join("labels.csv"));
    assert_eq!(labels.len(), 38);
    assert_eq!(labels.iter().filter(|r| r[1] == "1").count(), 8);
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(coordet(tmp.path(), &["synth", "--coord", "1"]).status.code(), Some(2));
    small_synth(tmp.path(), "0");
    let out = coordet(
        tmp.path(),
        &["detect", "--input", "synth.jsonl", "--loops", "many", "--run-dir", "r"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_reports_an_error() {
    let tmp = TempDir::new().unwrap();
    let out = coordet(tmp.path(), &["ingest", "--input", "absent.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn detect_writes_a_complete_reproducible_run() {
    let tmp = TempDir::new().unwrap();
    small_synth(tmp.path(), "1");
    let a = detect(tmp.path(), "a", &[]);
    let b = detect(tmp.path(), "b", &[]);
    for f in [
        "config.toml",
        "em_rounds.json",
        "graph.csv",
        "q_matrix.csv",
        "result.csv",
        "metrics.csv",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert!(a.join("checkpoints/pretrained.json").is_file());
    assert!(a.join("checkpoints/joint.json").is_file());
    assert_eq!(
        fs::read(a.join("result.csv")).unwrap(),
        fs::read(b.join("result.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("q_matrix.csv")).unwrap(),
        fs::read(b.join("q_matrix.csv")).unwrap()
    );

    // Rerunning from the saved config and checkpoint gives the same result.
    let c = detect(
        tmp.path(),
        "c",
        &[
            "--config",
            "a/config.toml",
            "--checkpoint",
            "a/checkpoints/pretrained.json",
        ],
    );
    assert_eq!(
        fs::read(a.join("result.csv")).unwrap(),
        fs::read(c.join("result.csv")).unwrap()
    );
}

#[test]
fn eval_reproduces_detect_metrics() {
    let tmp = TempDir::new().unwrap();
    small_synth(tmp.path(), "2");
    let run = detect(tmp.path(), "run", &["--estep-only"]);
    ok(
        tmp.path(),
        &[
            "eval",
            "--result",
            "run/result.csv",
            "--labels",
            "labels.csv",
            "--out",
            "m.csv",
        ],
    );
    assert_eq!(read_csv(&run.join("metrics.csv")), read_csv(&tmp.path().join("m.csv")));
}

#[test]
fn revealed_accounts_are_clamped_and_excluded() {
    let tmp = TempDir::new().unwrap();
    small_synth(tmp.path(), "5");
    let labels = read_csv(&tmp.path().join("labels.csv"));
    let revealed: Vec<&Vec<String>> = labels
        .iter()
        .filter(|r| r[1] == "1")
        .take(2)
        .chain(labels.iter().filter(|r| r[1] == "0").take(2))
        .collect();
    let mut text = String::from("account,group\n");
    for r in &revealed {
        text.push_str(&format!("{},{}\n", r[0], r[1]));
    }
    fs::write(tmp.path().join("revealed.csv"), text).unwrap();
    let run = detect(tmp.path(), "semi", &["--revealed", "revealed.csv", "--groups", "2"]);

    let q = read_csv(&run.join("q_matrix.csv"));
    for r in &revealed {
        let row = q.iter().find(|q| q[0] == r[0]).unwrap();
        let class: usize = r[1].parse().unwrap();
        for g in 0..2 {
            let expect = if g == class { "1" } else { "0" };
            assert_eq!(row[1 + g], expect, "account {}", r[0]);
        }
    }
    let metrics = read_csv(&run.join("metrics.csv"));
    assert_eq!(metrics[0][0], (labels.len() - 4).to_string());
    assert_eq!(metrics[0][1], (8 - 2).to_string());
}

#[test]
fn sweep_summary_aggregates_runs() {
    let tmp = TempDir::new().unwrap();
    small_synth(tmp.path(), "6");
    ok(
        tmp.path(),
        &[
            "sweep",
            "--input",
            "synth.jsonl",
            "--labels",
            "labels.csv",
            "--preset",
            "compact",
            "--loops",
            "1,2",
            "--seeds",
            "0,1,2",
            "--out-dir",
            "sw",
        ],
    );
    let runs = read_csv(&tmp.path().join("sw/runs.csv"));
    let summary = read_csv(&tmp.path().join("sw/summary.csv"));
    assert_eq!(runs.len(), 6);
    assert_eq!(summary.len(), 2);
    // runs.csv columns: loops, seed, n, positives, ap, auc, max_f1, f1, precision, recall, macro_f1
    for s in &summary {
        let vals: Vec<Vec<f64>> = runs
            .iter()
            .filter(|r| r[0] == s[0])
            .map(|r| r[4..].iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(s[1], vals.len().to_string());
        for k in 0..7 {
            let n = vals.len() as f64;
            let mean = vals.iter().map(|v| v[k]).sum::<f64>() / n;
            let var = vals.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let got_mean: f64 = s[2 + 2 * k].parse().unwrap();
            let got_std: f64 = s[3 + 2 * k].parse().unwrap();
            assert!((got_mean - mean).abs() < 1e-12);
            assert!((got_std - var.sqrt()).abs() < 1e-12);
        }
    }
    let empty = coordet(
        tmp.path(),
        &[
            "sweep",
            "--input",
            "synth.jsonl",
            "--labels",
            "labels.csv",
            "--seeds",
            "",
        ],
    );
    assert_eq!(empty.status.code(), Some(2));
}
