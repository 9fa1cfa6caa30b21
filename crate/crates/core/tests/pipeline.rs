//! The command-line pipeline end to end on a tiny dataset.

use std::path::Path;

use dad_core::cli::{dispatch_to, RunManifest};
use dad_core::evaluator::parse_report_csv;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dispatch_to(std::iter::once("dad").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "dad {}\n{out}\n{err}", args.join(" "));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let f = |name: &str| d.join(name);

    ok(&["synth-data", "--out", p(&data), "--per-class", "4", "--size", "16", "--seed", "1"]);
    ok(&["synth-data", "--out", p(&data), "--split", "test", "--per-class", "2", "--size", "16", "--seed", "2"]);
    assert_eq!(std::fs::read_dir(data.join("train")).unwrap().count(), 10);

    ok(&[
        "train-vq", "--data", p(&data), "--set", "epochs=1", "--set", "factor=2", "--set", "hidden=8",
        "--set", "codebook_size=16", "--set", "latent_dim=4", "--out", p(&f("vq.bin")),
    ]);
    ok(&[
        "train", "--data", p(&data), "--arch", "wide-cnn", "--set", "objective=ce", "--set", "epochs=2",
        "--augment", "blur:2", "--out", p(&f("teacher.bin")),
    ]);
    let cache_out = ok(&[
        "build-cache", "--data", p(&data), "--teacher", p(&f("teacher.bin")), "--discretizer", p(&f("vq.bin")),
        "--out", p(&f("cache.bin")),
    ]);
    assert!(!cache_out.is_empty());

    for obj in ["ce", "dad"] {
        ok(&[
            "train", "--data", p(&data), "--set", &format!("objective={obj}"), "--set", "epochs=2",
            "--teacher", p(&f("teacher.bin")), "--cache", p(&f("cache.bin")), "--discretizer", p(&f("vq.bin")),
            "--out", p(&f(&format!("{obj}.bin"))),
        ]);
    }

    std::fs::write(
        f("suites.txt"),
        "suite clean = clean\nsuite fog = corrupt fog 2\nsuite pix = corrupt pixelate 4\navg fog pix\nmce fog 1\nmce fog 3\n",
    )
    .unwrap();
    ok(&[
        "eval", "--data", p(&data), "--split", "test", "--suites", p(&f("suites.txt")),
        "--model", &format!("ce={}", p(&f("ce.bin"))), "--model", &format!("dad={}", p(&f("dad.bin"))),
        "--baseline", p(&f("ce.bin")), "--report", p(&f("report.csv")),
    ]);
    let rows = parse_report_csv(&std::fs::read_to_string(f("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let acc = |n: &str| r.accuracy.iter().find(|(c, _)| c == n).unwrap().1;
        assert!((r.average - (acc("fog") + acc("pix")) / 2.0).abs() < 1e-9);
    }
    // the baseline against itself is 100 unless it never errs
    assert!(matches!(rows[0].mce, Some(v) if v == 100.0) || rows[0].mce.is_none());

    ok(&[
        "budget", "--log", &format!("ce={}.log.csv", p(&f("ce.bin"))),
        "--log", &format!("dad={}.log.csv", p(&f("dad.bin"))), "--out", p(&f("budget.csv")),
    ]);
    let budget = std::fs::read_to_string(f("budget.csv")).unwrap();
    assert!(budget.starts_with("run,forward,backward,attack_steps,relative_cost\nce,"));

    ok(&[
        "chart-data", "--data", p(&data), "--split", "test", "--suites", p(&f("suites.txt")),
        "--model", &format!("ce={}", p(&f("ce.bin"))), "--batches", "3", "--batch-size", "4",
        "--out", p(&f("chart.csv")),
    ]);
    let chart = std::fs::read_to_string(f("chart.csv")).unwrap();
    assert_eq!(chart.lines().count(), 1 + 3);

    // replaying a manifest reproduces the cache byte for byte
    let manifest = RunManifest::parse(&std::fs::read_to_string(f("cache.bin.manifest")).unwrap()).unwrap();
    assert_eq!(manifest.command, "build-cache");
    let first = std::fs::read(f("cache.bin")).unwrap();
    std::fs::remove_file(f("cache.bin")).unwrap();
    ok(&["rerun", p(&f("cache.bin.manifest"))]);
    assert_eq!(std::fs::read(f("cache.bin")).unwrap(), first);
}

#[test]
fn diagnose_commands_report_passes() {
    for check in ["lemma31", "lemma33", "lemma34"] {
        let out = ok(&["diagnose", check, "--trials", "20", "--seed", "3"]);
        assert!(out.contains("20/20 passed"), "{out}");
    }
    let out = ok(&["diagnose", "wasserstein", "--trials", "3", "--grid", "50"]);
    assert!(out.contains("3/3 passed"), "{out}");
}

#[test]
fn failures_exit_nonzero() {
    let (code, _, err) = run(&["eval", "--data", "/nonexistent", "--suites", "x", "--model", "a=b", "--report", "r"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(run(&["train"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}
