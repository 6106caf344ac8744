use std::path::Path;
use std::process::{Command, Output};

fn priorsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorsr")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("osc1.csv");
    let text = stdout(&priorsr(&["gen-data", "--system", "osc1", "--out", p(&out)]));
    assert!(text.starts_with("wrote "));
    let csv = std::fs::read_to_string(&out).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.contains('x') && header.contains("split"), "{header}");
    assert!(csv.lines().count() > 100);
}

#[test]
fn gen_data_applies_noise_and_subsampling() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.csv");
    let noisy = dir.path().join("noisy.csv");
    stdout(&priorsr(&["gen-data", "--system", "crk", "--out", p(&clean)]));
    stdout(&priorsr(&[
        "gen-data",
        "--system",
        "crk",
        "--out",
        p(&noisy),
        "--noise",
        "0.05",
        "--seed",
        "4",
        "--fraction",
        "0.5",
    ]));
    let rows = |f: &Path| std::fs::read_to_string(f).unwrap().lines().count();
    assert!(rows(&noisy) < rows(&clean));
    let again = dir.path().join("again.csv");
    stdout(&priorsr(&[
        "gen-data",
        "--system",
        "crk",
        "--out",
        p(&again),
        "--noise",
        "0.05",
        "--seed",
        "4",
        "--fraction",
        "0.5",
    ]));
    assert_eq!(std::fs::read(&noisy).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn check_uses_an_edited_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("crk.json");
    let json = stdout(&priorsr(&["catalog", "--system", "crk"]));
    let mut cs: serde_json::Value = serde_json::from_str(&json).unwrap();
    let checks = cs["checks"].as_array_mut().unwrap();
    let before = checks.len();
    checks.truncate(1);
    std::fs::write(&file, serde_json::to_string(&cs).unwrap()).unwrap();
    let out = stdout(&priorsr(&["check", "--system", "crk", "--expr", "A", "--catalog", p(&file)]));
    let lines = out.lines().filter(|l| l.starts_with("pass") || l.starts_with("FAIL")).count();
    assert_eq!(lines, 1);
    assert!(before > 1);
}

#[test]
fn check_reports_each_prior() {
    let ok = stdout(&priorsr(&["check", "--system", "crk", "--expr", "-0.1899*A^2 + 0.4598*A^2/(0.7498*A^4 + 1)"]));
    assert!(ok.contains("valid = true"));
    assert!(!ok.contains("FAIL"));
    let bad = stdout(&priorsr(&["check", "--system", "crk", "--expr", "p0*A + p1", "--params", "-1, 2"]));
    assert!(bad.contains("FAIL") && bad.contains("valid = false") && bad.contains("reason = "));
}

#[test]
fn bad_input_exits_nonzero() {
    assert!(!priorsr(&["check", "--system", "crk", "--expr", "A +* 2"]).status.success());
    assert!(!priorsr(&["check", "--system", "crk", "--expr", "A", "--params", "1,x"]).status.success());
    assert!(!priorsr(&["catalog", "--system", "nope"]).status.success());
    assert!(!priorsr(&["insights", "--checkpoint", "/nonexistent/ck.jsonl"]).status.success());
}

#[test]
fn catalog_prints_json() {
    let text = stdout(&priorsr(&["catalog", "--system", "ecoli"]));
    assert!(text.trim_start().starts_with('{'));
    assert!(text.contains("no growth without population"));
}

#[test]
fn small_run_then_eval_and_insights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let report =
        stdout(&priorsr(&["run", "--system", "ecoli", "--seed", "2", "--max-samples", "150", "--output", p(&out)]));
    assert!(report.contains("best_expr") && report.contains("nmse_id"));
    for f in ["report.toml", "trace.tsv", "checkpoint.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let ck = out.join("checkpoint.jsonl");
    let eval = stdout(&priorsr(&["eval", "--checkpoint", p(&ck), "--system", "ecoli"]));
    assert!(eval.contains("expr = ") && eval.contains("nmse_ood = "));
    stdout(&priorsr(&["insights", "--checkpoint", p(&ck)]));
}
