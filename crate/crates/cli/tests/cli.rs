use std::path::{Path, PathBuf};
use std::process::Command;

use fa_forge_cli::run_cli;
use fa_forge_core::metrics::parse_report_csv;

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/data")
        .join(name)
        .display()
        .to_string()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fa-forge").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn salary_gap_answer_is_exact() {
    let ir = data("salary_gap.json");
    let (code, out, err) = cli(&[
        "run",
        "--dataset",
        "university",
        "--ir",
        &ir,
        "--noise",
        "off",
        "--key-bits",
        "128",
    ]);
    assert_eq!(code, 0, "{err}");
    let first = out.lines().next().unwrap();
    assert!(first.contains("is 56.075"), "{first}");
    assert!(first.contains("is 78.375"), "{first}");
    assert!(first.contains("role = professor is 108.5"), "{first}");
}

#[test]
fn binary_runs_and_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fa-forge");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let nl = Command::new(bin)
        .args(["plan", "--nl", "average age"])
        .env_remove("FA_FORGE_LLM_ENDPOINT")
        .env_remove("FA_FORGE_LLM_KEY")
        .output()
        .unwrap();
    assert_eq!(nl.status.code(), Some(3));
}

#[test]
fn malformed_ir_exits_two_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let ir = dir.path().join("bad.json");
    std::fs::write(&ir, r#"{"subqueries": [{"intent": "Mean"}]}"#).unwrap();
    let (code, _, err) = cli(&["plan", "--ir", &p(&ir)]);
    assert_eq!(code, 2);
    assert!(err.contains("feature"), "{err}");

    std::fs::write(
        &ir,
        r#"{"subqueries": [{"intent": "Mean", "feature": "shoe_size", "filter": true}]}"#,
    )
    .unwrap();
    assert_eq!(cli(&["plan", "--ir", &p(&ir)]).0, 2);
}

#[test]
fn validate_reports_incomplete_and_broken_dags() {
    let dir = tempfile::tempdir().unwrap();
    let ir = data("salary_gap.json");
    let plan_dir = dir.path().join("plan");
    let opt_dir = dir.path().join("opt");
    assert_eq!(
        cli(&["plan", "--dataset", "university", "--ir", &ir, "--out", &p(&plan_dir)]).0,
        0
    );
    assert_eq!(
        cli(&[
            "optimize",
            "--dataset",
            "university",
            "--ir",
            &ir,
            "--out",
            &p(&opt_dir)
        ])
        .0,
        0
    );

    let dag = p(&opt_dir.join("dag.json"));
    let (code, out, _) = cli(&["validate", "--dataset", "university", "--dag", &dag, "--ir", &ir]);
    assert_eq!(code, 0);
    assert!(out.starts_with("valid"));

    let partial = p(&plan_dir.join("dag_1.json"));
    let (code, _, err) = cli(&["validate", "--dataset", "university", "--dag", &partial, "--ir", &ir]);
    assert_eq!(code, 2);
    assert!(err.contains("IncompleteAnswer"), "{err}");

    let text = std::fs::read_to_string(&dag)
        .unwrap()
        .replace("\"NoiseAdd\"", "\"Shuffle\"");
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, text).unwrap();
    assert_eq!(cli(&["validate", "--dag", &p(&broken)]).0, 2);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ir = data("salary_gap.json");
    let run = |name: &str, seed: &str| -> PathBuf {
        let out = dir.path().join(name);
        let args = [
            "run",
            "--dataset",
            "university",
            "--ir",
            &ir,
            "--seed",
            seed,
            "--key-bits",
            "128",
            "--out",
            &p(&out),
        ];
        assert_eq!(cli(&args).0, 0);
        out
    };
    let a = std::fs::read(run("a.json", "7")).unwrap();
    let b = std::fs::read(run("b.json", "7")).unwrap();
    let c = std::fs::read(run("c.json", "8")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bench_csv_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let (code, _, err) = cli(&[
        "bench",
        "--mock-crypto",
        "--format",
        "csv",
        "--ablation",
        "--out",
        &p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let report = parse_report_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.queries, 20);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].ratio, 1.0);
    assert!(report.rows[1].ops.is_none());
}

#[test]
fn empty_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.json");
    std::fs::write(&corpus, "[]").unwrap();
    let (code, _, err) = cli(&["bench", "--mock-crypto", "--corpus", &p(&corpus)]);
    assert_eq!(code, 1);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn generated_keys_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys.json");
    let (code, out, _) = cli(&["gen-keys", "--bits", "128", "--seed", "3", "--out", &p(&keys)]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&keys).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for field in v.as_object().unwrap().values() {
        if let Some(s) = field.as_str() {
            if s.len() > 8 {
                assert!(!out.contains(s), "secret material printed");
            }
        }
    }

    let csv = dir.path().join("adult.csv");
    assert_eq!(
        cli(&["gen-data", "--rows", "40", "--seed", "2", "--out", &p(&csv)]).0,
        0
    );
    let ir = dir.path().join("q.json");
    std::fs::write(
        &ir,
        r#"{"subqueries": [{"intent": "Count", "filter": [{"feature": "sex", "op": "=", "value": "Female"}]}]}"#,
    )
    .unwrap();
    let (code, out, err) = cli(&[
        "run",
        "--data",
        &p(&csv),
        "--ir",
        &p(&ir),
        "--keys",
        &p(&keys),
        "--noise",
        "off",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("The number of clients where sex = Female is"), "{out}");
}
