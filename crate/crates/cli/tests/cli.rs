use std::path::Path;
use std::process::{Command, Output};

fn mce(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mce")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "[data]\ntrain_samples = 120\ntest_samples = 40\n[train]\nepochs = 1\nbatch_size = 40\n[pretrain]\nepochs = 2\n";

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mce(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(mce(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(mce(&["train", "--seed", "minus-one"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "[train]\nepochs = 0\n").unwrap();
    let o = mce(&["gen-data", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let o = mce(&["gen-data", "--override", "rce.lambda_sup=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rce.lambda_sup"));
}

#[test]
fn shapley_reads_a_coalition_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.txt"), "players = 3\n0 0\n1 0.2\n2 0.3\n3 0.5\n4 0.5\n5 0.7\n6 0.8\n7 1.0\n").unwrap();
    let o = mce(&["shapley", "--game", "g.txt", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("s/shapley.csv")).unwrap();
    let phi: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    for (got, want) in phi.iter().zip([0.2, 0.3, 0.5]) {
        assert!((got - want).abs() < 1e-12);
    }

    std::fs::write(dir.path().join("short.txt"), "players = 2\n0 0\n1 1\n3 2\n").unwrap();
    let o = mce(&["shapley", "--game", "short.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("coalition 2 is missing"), "{}", stderr(&o));
}

#[test]
fn stages_reuse_matching_artifacts_and_refuse_others() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), TINY).unwrap();
    let base = ["--config", "c.cfg", "--out", "run"];
    let run = |sub: &str, extra: &[&str]| {
        let mut args = vec![sub];
        args.extend(base);
        args.extend(extra);
        mce(&args, dir.path())
    };
    assert!(run("train", &[]).status.success());
    let model = std::fs::read(dir.path().join("run/train/model.bin")).unwrap();

    // evaluation settings do not touch the trained model
    let o = run("eval", &["--override", "eval.path=completed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("run/train/model.bin")).unwrap(), model);
    let manifest = std::fs::read_to_string(dir.path().join("run/eval/manifest.txt")).unwrap();
    assert!(manifest.contains("path = completed"));

    // a different seed would mix datasets
    let o = run("train", &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different settings"));
}

#[test]
fn report_only_reads_logs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), TINY).unwrap();
    for (name, lambda) in [("base", "0"), ("full", "1")] {
        let o = mce(
            &["train", "--config", "c.cfg", "--out", name, "--override", &format!("rce.lambda_single={lambda}"), "--override", "eval.probe_every=1"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = mce(&["report", "--compare", "base", "full", "--out", "rep"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cap = std::fs::read_to_string(dir.path().join("rep/capability.csv")).unwrap();
    assert!(cap.starts_with("run,epoch,modality,capability,upperbound\n"));
    assert_eq!(cap.lines().filter(|l| l.starts_with("base,")).count(), 3);
    assert_eq!(cap.lines().filter(|l| l.starts_with("full,")).count(), 3);
    let repr = std::fs::read_to_string(dir.path().join("rep/repr.csv")).unwrap();
    assert_eq!(repr.lines().count(), 3);

    // no training log, no report
    let o = mce(&["report", "--compare", "base", "nowhere", "--out", "rep2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("nowhere").exists());
}
