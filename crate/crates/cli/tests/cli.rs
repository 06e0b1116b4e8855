use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layerquant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A tiny trained model and a two-document corpus, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        std::fs::create_dir(&corpus).unwrap();
        let text = "The boat came back to the harbor before the rain. Anna carried the lantern home. ";
        std::fs::write(corpus.join("a.txt"), text.repeat(12)).unwrap();
        std::fs::write(corpus.join("b.txt"), text.to_uppercase().repeat(6)).unwrap();
        let model = root.join("model.safetensors");
        ok(&[
            "--seed", "3", "train-toy", "--corpus", s(&corpus), "--out", s(&model), "--layers", "4", "--d-model", "16",
            "--heads", "2", "--d-ff", "32", "--steps", "4", "--batch-size", "2", "--seq-len", "32",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn corpus_args(f: &Fixture) -> Vec<String> {
    vec!["--corpus".into(), s(&f.path("corpus")).into(), "--seq-len".into(), "64".into()]
}

fn with(base: &[&str], extra: &[String]) -> Vec<String> {
    base.iter().map(|x| x.to_string()).chain(extra.iter().cloned()).collect()
}

fn ok_v(args: &[String]) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn write_report(path: &Path, n: usize) {
    let lim: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 * 0.37) % 1.0).collect();
    let zd: Vec<f64> = (0..n).map(|i| 0.1 + (i as f64 * 0.13) % 0.1).collect();
    let report = layerquant::importance::ImportanceReport::from_scores(n, lim, zd, String::new());
    std::fs::write(path, report.to_json().unwrap()).unwrap();
}

#[test]
fn zd_score_needs_no_corpus_and_is_stable() {
    let f = fixture();
    let model = f.path("model.safetensors");
    let a = ok(&["score", "--model", s(&model), "--scores", "zd"]);
    let b = ok(&["score", "--model", s(&model), "--scores", "zd"]);
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["n_layers"], 4);
    assert_eq!(v["lim"].as_array().unwrap().len(), 0);
    assert_eq!(v["zd_order"].as_array().unwrap().len(), 4);
    assert_eq!(v["calibration_fingerprint"], "");
}

#[test]
fn lim_without_corpus_is_usage_error() {
    let f = fixture();
    let out = run(&["score", "--model", s(&f.path("model.safetensors")), "--scores", "lim"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));
}

#[test]
fn lim_score_is_deterministic_across_threads() {
    let f = fixture();
    let model = f.path("model.safetensors");
    let base = ["score", "--model", s(&model)];
    let one = ok_v(&with(&["--threads", "1"], &with(&base, &corpus_args(f))));
    let three = ok_v(&with(&["--threads", "3"], &with(&base, &corpus_args(f))));
    assert_eq!(one, three);
    let v: Value = serde_json::from_str(&one).unwrap();
    assert_eq!(v["lim"].as_array().unwrap().len(), 4);
    assert_eq!(v["calibration_fingerprint"].as_str().unwrap().len(), 64);
}

#[test]
fn corrupt_model_names_offset() {
    let f = fixture();
    let bad = f.path("corrupt.safetensors");
    let mut bytes = std::fs::read(f.path("model.safetensors")).unwrap();
    bytes[..8].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&["score", "--model", s(&bad), "--scores", "zd"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn plan_modes() {
    let f = fixture();
    let report = f.path("report32.json");
    write_report(&report, 32);
    let plan = |extra: &[&str]| -> Value {
        let mut args = vec!["plan", "--report", s(&report)];
        args.extend_from_slice(extra);
        serde_json::from_str(&ok(&args)).unwrap()
    };
    let p = plan(&["--n-low", "10", "--bits", "4,2"]);
    assert_eq!(p["avg_bits"], 3.375);
    assert_eq!(p["n_higher"], 22);
    let p = plan(&["--budget", "20GB", "--m-lower", "17GB", "--m-higher", "34GB"]);
    assert_eq!(p["n_higher"], 5);
    assert_eq!(p["budget"]["m_available"], 20_000_000_000u64);
    let p = plan(&["--three-level", "4"]);
    assert_eq!(p["avg_bits"], 4.0);
    let p = plan(&["--prune", "2", "--ordering", "sequential_top", "--base-bits", "8"]);
    assert_eq!(p["pruned_layers"], serde_json::json!([29, 30]));
    let p = plan(&["--outlier", "6", "--outlier-fractions", "0.01,0.001"]);
    let fr = p["outlier_fraction_per_layer"].as_array().unwrap();
    assert_eq!(fr.iter().filter(|x| x.as_f64() == Some(0.01)).count(), 6);

    let out = run(&["plan", "--report", s(&report), "--n-low", "3", "--three-level", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["plan", "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn quantize_then_eval() {
    let f = fixture();
    let model = f.path("model.safetensors");
    let report = f.path("report.json");
    ok(&["score", "--model", s(&model), "--scores", "zd", "--out", s(&report)]);
    let plan = f.path("plan.json");
    ok(&[
        "plan", "--report", s(&report), "--ordering", "zd", "--n-low", "2", "--bits", "8,4", "--group-size", "16",
        "--out", s(&plan),
    ]);
    let qpath = f.path("quantized.safetensors");
    let summary: Value = serde_json::from_str(&ok(&[
        "quantize", "--model", s(&model), "--plan", s(&plan), "--out", s(&qpath),
    ]))
    .unwrap();
    assert_eq!(summary["exact_bytes"], summary["plan_exact_bytes"]);

    let eval_q: Value = serde_json::from_str(&ok_v(&with(
        &["eval", "--model", s(&qpath), "--baseline", s(&model)],
        &corpus_args(f),
    )))
    .unwrap();
    assert_eq!(eval_q["plan"]["ordering"], "zd");
    assert_eq!(eval_q["plan"]["n_low_layers"], 2);
    let ppl = eval_q["perplexity"].as_f64().unwrap();
    assert!(ppl >= 1.0);
    let r = eval_q["retention"].as_f64().unwrap();
    assert!(r > 0.0 && r <= 1.0);

    // an all-16-bit plan leaves perplexity untouched
    let plan16 = f.path("plan16.json");
    let mut p: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    p["bits_per_layer"] = serde_json::json!([16, 16, 16, 16]);
    std::fs::write(&plan16, p.to_string()).unwrap();
    let q16 = f.path("q16.safetensors");
    ok(&["quantize", "--model", s(&model), "--plan", s(&plan16), "--out", s(&q16)]);
    let a: Value = serde_json::from_str(&ok_v(&with(&["eval", "--model", s(&q16)], &corpus_args(f)))).unwrap();
    let b: Value = serde_json::from_str(&ok_v(&with(&["eval", "--model", s(&model)], &corpus_args(f)))).unwrap();
    assert_eq!(a["perplexity"], b["perplexity"]);

    let mismatch = f.path("plan_bad.json");
    p["bits_per_layer"] = serde_json::json!([4, 4, 4]);
    std::fs::write(&mismatch, p.to_string()).unwrap();
    let out = run(&["quantize", "--model", s(&model), "--plan", s(&mismatch), "--out", s(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_empty_corpus_fails() {
    let f = fixture();
    let empty = f.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&["eval", "--model", s(&f.path("model.safetensors")), "--corpus", s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_csv() {
    let f = fixture();
    let model = f.path("model.safetensors");
    let summary = f.path("sweep.json");
    let args = with(
        &["sweep", "--model", s(&model), "--group-size", "16", "--summary", s(&summary)],
        &corpus_args(f),
    );
    let csv = ok_v(&args);
    assert_eq!(csv, ok_v(&args));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ordering,n_low,avg_bits,idealized_bytes,exact_bytes,perplexity,stddev");
    assert_eq!(lines.len(), 1 + 4 * 5);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let ppl_at = |n_low: &str| -> Vec<&str> { rows.iter().filter(|r| r[1] == n_low).map(|r| r[5]).collect() };
    for n_low in ["0", "4"] {
        let p = ppl_at(n_low);
        assert!(p.iter().all(|x| *x == p[0]), "{n_low}: {p:?}");
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert!(v["baseline_perplexity"].as_f64().unwrap() >= 1.0);
}

#[test]
fn compare_prune_csv() {
    let f = fixture();
    let model = f.path("model.safetensors");
    let csv = ok_v(&with(
        &["compare-prune", "--model", s(&model), "--bits", "4,2", "--group-size", "16"],
        &corpus_args(f),
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 3);
    for inc in lines[1..].chunks(3) {
        let mem: Vec<&str> = inc.iter().map(|l| l.split(',').nth(6).unwrap()).collect();
        assert!(mem.iter().all(|m| *m == mem[0]));
    }
    let out = run(&["compare-prune", "--model", s(&model), "--bits", "8,2", "--corpus", s(&f.path("corpus"))]);
    assert_eq!(out.status.code(), Some(2));
}
