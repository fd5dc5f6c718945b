use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use warpgrid::metrics::EvalReport;
use warpgrid::solver::TraceEntry;
use warpgrid::Prediction;
use warpgrid_cli::commands::{trace_path, EVAL_CSV_FILE, EVAL_JSON_FILE, RUN_CONFIG_FILE};
use warpgrid_cli::viz::viz_paths;
use warpgrid_cli::{run, EXIT_IO, EXIT_OK, EXIT_USAGE, LOCK_FILE};

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| {
            (
                f.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&f).unwrap(),
            )
        })
        .collect()
}

fn synth(out: &Path, count: &str, seed: &str) -> i32 {
    run([
        "warpgrid",
        "synth",
        "--count",
        count,
        "--size",
        "24",
        "--seed",
        seed,
        "--out",
        p(out),
    ])
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(synth(&t.path().join("a"), "3", "7"), EXIT_OK);
    assert_eq!(synth(&t.path().join("b"), "3", "7"), EXIT_OK);
    assert_eq!(synth(&t.path().join("c"), "3", "8"), EXIT_OK);
    let a = snapshot(&t.path().join("a"));
    assert!(a.len() > 3 && !a.contains_key(LOCK_FILE));
    assert_eq!(a, snapshot(&t.path().join("b")));
    assert_ne!(a, snapshot(&t.path().join("c")));
}

#[test]
fn zero_count_writes_only_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(synth(t.path(), "0", "1"), EXIT_OK);
    assert_eq!(snapshot(t.path()).into_keys().collect::<Vec<_>>(), ["manifest.json"]);
}

#[test]
fn zero_iterations_give_the_identity() {
    let t = tempfile::tempdir().unwrap();
    let (d, o) = (t.path().join("d"), t.path().join("o"));
    assert_eq!(synth(&d, "1", "2"), EXIT_OK);
    let code = run([
        "warpgrid",
        "solve",
        "--data",
        p(&d),
        "--iterations",
        "0",
        "--out",
        p(&o),
    ]);
    assert_eq!(code, EXIT_OK);
    let pred = Prediction::load(&o, "00000").unwrap();
    let id = Prediction::identity(24, 24, pred.conf_s.get(0, 0)).unwrap();
    assert_eq!(pred.grid_st, id.grid_st);
    assert_eq!(pred.grid_ts, id.grid_ts);
    let trace: Vec<TraceEntry> = serde_json::from_slice(&fs::read(trace_path(&o, "00000")).unwrap()).unwrap();
    assert!(trace.is_empty());
    assert!(o.join(RUN_CONFIG_FILE).exists());
}

#[test]
fn ground_truth_scores_perfectly() {
    let t = tempfile::tempdir().unwrap();
    let (d, e) = (t.path().join("d"), t.path().join("e"));
    assert_eq!(synth(&d, "2", "3"), EXIT_OK);
    assert_eq!(
        run(["warpgrid", "eval", "--data", p(&d), "--ground-truth", "--out", p(&e)]),
        EXIT_OK
    );
    let report: EvalReport = serde_json::from_slice(&fs::read(e.join(EVAL_JSON_FILE)).unwrap()).unwrap();
    assert_eq!(report.pairs, 2);
    for entry in &report.pck {
        assert_eq!(entry.value, Some(1.0));
    }
    for pair in &report.per_pair {
        assert_eq!(pair.synthetic_dense, Some(0.0));
        assert_eq!(pair.epe, Some(0.0));
    }
    let csv = fs::read_to_string(e.join(EVAL_CSV_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn solve_then_viz_on_a_single_pair() {
    let t = tempfile::tempdir().unwrap();
    let (d, o, v) = (t.path().join("d"), t.path().join("o"), t.path().join("v"));
    assert_eq!(synth(&d, "1", "4"), EXIT_OK);
    let (src, tgt) = (d.join("00000_src.png"), d.join("00000_tgt.png"));
    let pair = ["--source", p(&src), "--target", p(&tgt), "--id", "x"];
    let mut args = vec!["warpgrid", "solve", "--iterations", "5", "--out", p(&o)];
    args.extend(pair);
    assert_eq!(run(args), EXIT_OK);
    let mut args = vec!["warpgrid", "viz", "--pred", p(&o), "--out", p(&v)];
    args.extend(pair);
    assert_eq!(run(args), EXIT_OK);
    assert!(viz_paths(&v, "x").iter().all(|f| f.exists()));
}

#[test]
fn failures_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = p(t.path());
    assert_eq!(run(["warpgrid", "solve", "--out", out]), EXIT_USAGE);
    assert_eq!(run(["warpgrid", "synth", "--size", "2", "--out", out]), EXIT_USAGE);
    let missing = t.path().join("missing");
    assert_eq!(
        run([
            "warpgrid",
            "eval",
            "--data",
            p(&missing),
            "--ground-truth",
            "--out",
            out
        ]),
        EXIT_IO
    );
    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"sede": 1}"#).unwrap();
    assert_eq!(
        run(["warpgrid", "synth", "--config", p(&cfg), "--out", out]),
        EXIT_USAGE
    );
    fs::write(t.path().join(LOCK_FILE), "").unwrap();
    assert_eq!(synth(t.path(), "1", "1"), EXIT_IO);
}

#[test]
fn binary_reports_usage_errors_and_honours_thread_cap() {
    let bin = env!("CARGO_BIN_EXE_warpgrid");
    let t = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["synth", "--count", "-1", "--out", p(t.path())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let status = Command::new(bin)
        .env("WARPGRID_THREADS", "0")
        .args(["synth", "--out", p(t.path())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let status = Command::new(bin)
        .env("WARPGRID_THREADS", "1")
        .args(["synth", "--count", "1", "--size", "16", "--out", p(t.path())])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
}
