use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "per_class = 40\nepochs = 30\n";

fn syncsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syncsel")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &TempDir, extra: &str) -> PathBuf {
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}{extra}", s(&out)));
    let o = syncsel(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn train_writes_exactly_three_files() {
    let dir = TempDir::new().unwrap();
    let out = train(&dir, "");
    assert_eq!(listing(&out), vec!["checkpoint", "config.resolved", "metrics.csv"]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,total,sync,coverage,acc,lr\n"));
    assert_eq!(metrics.lines().count(), 31);
}

#[test]
fn trace_and_dump_are_opt_in() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}trace = true\n", s(&out)));
    let o = syncsel(&["train", "--config", s(&cfg), "--dump"]);
    assert!(o.status.success());
    assert_eq!(
        listing(&out),
        vec!["cal.csv", "checkpoint", "config.resolved", "metrics.csv", "test.csv", "trace.csv", "train.csv"]
    );
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "out_dir = x\nlamda = 6\n");
    let o = syncsel(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn divergence_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}lr = 1e300\n", s(&dir.path().join("r"))));
    let o = syncsel(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn training_is_reproducible_from_resolved_config() {
    let dir = TempDir::new().unwrap();
    let first = train(&dir, "batch_size = 32\n");
    let second = dir.path().join("second");
    let o = syncsel(&["train", "--config", s(&first.join("config.resolved")), "--out", s(&second)]);
    assert!(o.status.success());
    let third = dir.path().join("third");
    let o = syncsel(&["train", "--config", s(&first.join("config.resolved")), "--out", s(&third)]);
    assert!(o.status.success());
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    for f in ["metrics.csv", "checkpoint"] {
        assert_eq!(read(&first, f), read(&second, f), "{f}");
        assert_eq!(read(&second, f), read(&third, f), "{f}");
    }
}

fn gen_data(dir: &TempDir) -> PathBuf {
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}", s(&data)));
    let o = syncsel(&["gen", "--config", s(&cfg)]);
    assert!(o.status.success());
    assert_eq!(listing(&data), vec!["cal.csv", "data.csv", "test.csv", "train.csv"]);
    data
}

#[test]
fn eval_sr_and_smp_agree_on_accuracy() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "");
    let data = gen_data(&dir);
    let mut accs = Vec::new();
    for mech in ["sr", "smp:2.5", "smp:0.5"] {
        let out = dir.path().join(mech.replace(':', "_"));
        let o = syncsel(&[
            "eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data.join("test.csv")),
            "--mechanism", mech, "--out", s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(listing(&out), vec!["confusion.csv", "rc_curve.csv", "regions.csv"]);
        let rc = fs::read_to_string(out.join("rc_curve.csv")).unwrap();
        assert_eq!(rc.lines().count(), 11);
        accs.push(column(&rc, "accuracy"));
    }
    assert_eq!(accs[0], accs[1]);
    assert_eq!(accs[0], accs[2]);
}

#[test]
fn eval_grid_and_calibration() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "");
    let data = gen_data(&dir);
    let out = dir.path().join("ev");
    let o = syncsel(&[
        "eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data.join("test.csv")),
        "--grid", "0.5,1.0", "--cal", s(&data.join("cal.csv")), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rc = fs::read_to_string(out.join("rc_curve.csv")).unwrap();
    assert_eq!(rc.lines().count(), 3);
    assert!(rc.starts_with("coverage,threshold,risk,accuracy\n"));
    let last: Vec<&str> = rc.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "1.000000");
    assert_eq!(last[1], "-inf");
    let conf = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let cells: Vec<f64> = conf.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((cells[..4].iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn eval_missing_checkpoint_exits_one() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(&dir);
    let o = syncsel(&[
        "eval", "--checkpoint", s(&dir.path().join("nope")), "--data", s(&data.join("test.csv")),
        "--out", s(&dir.path().join("ev")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_head_on_dg_checkpoint() {
    let dir = TempDir::new().unwrap();
    let run = train(&dir, "loss = dg\n");
    let data = gen_data(&dir);
    let o = syncsel(&[
        "eval", "--checkpoint", s(&run.join("checkpoint")), "--data", s(&data.join("test.csv")),
        "--out", s(&dir.path().join("ev")),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("abstain"));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let a = syncsel(&["verify", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = syncsel(&["verify", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["passed"], serde_json::Value::Bool(true), "{line}");
    }
}

#[test]
fn verify_detects_halved_modulus() {
    let o = syncsel(&["verify", "--halve-modulus"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lipschitz"));
}

#[test]
fn sweep_runs_each_gamma_once() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}", s(&out)));
    let o = syncsel(&["sweep", "--config", s(&cfg), "--gamma", "0.5,1,2.5,1", "--grid", "0.5,1.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("duplicate gamma 1"));
    assert_eq!(listing(&out), vec!["gamma_0.5", "gamma_1", "gamma_2.5", "sweep.csv"]);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 2 * 2);
    for g in ["gamma_0.5", "gamma_1", "gamma_2.5"] {
        let names = listing(&out.join(g));
        assert!(names.contains(&"eval_head".to_string()) && names.contains(&"eval_sr".to_string()));
    }
}

#[test]
fn single_gamma_sweep_matches_eval() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write_config(dir.path(), &format!("out_dir = {}\n{SMALL}", s(&out)));
    let o = syncsel(&["sweep", "--config", s(&cfg), "--gamma", "2.5"]);
    assert!(o.status.success());
    let data = gen_data(&dir);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    for mech in ["head", "sr"] {
        let ev = dir.path().join(format!("ev_{mech}"));
        let o = syncsel(&[
            "eval", "--checkpoint", s(&out.join("gamma_2.5/checkpoint")), "--data", s(&data.join("test.csv")),
            "--mechanism", mech, "--out", s(&ev),
        ]);
        assert!(o.status.success());
        let rc = fs::read_to_string(ev.join("rc_curve.csv")).unwrap();
        let expected: Vec<String> = column(&rc, "coverage")
            .iter()
            .zip(column(&rc, "accuracy"))
            .map(|(c, a)| format!("2.5,{mech},{c},{a}"))
            .collect();
        let got: Vec<String> = table.lines().filter(|l| l.split(',').nth(1) == Some(mech)).map(String::from).collect();
        assert_eq!(got, expected);
    }
}
