//! End-to-end tests of the `d2c` binary: help text, exit codes, the stage
//! chain and the comparison harness.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2c::config::RunConfig;
use d2c::format;
use d2c::harness::Harness;
use d2c_core::datagen::{DatasetKind, LabeledDataset};
use d2c_core::score::{McConfig, ScoreTable};
use d2c_core::Tensor;

const SUBCOMMANDS: [&str; 9] = [
    "gen-data",
    "train-ref",
    "score",
    "select",
    "attach",
    "train",
    "sample",
    "eval",
    "compare",
];

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn d2c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2c")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = d2c(args);
    assert!(
        out.status.success(),
        "d2c {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Compares with the stored help text; `D2C_BLESS=1` rewrites it.
#[test]
fn help_text_matches_golden_files() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut all: Vec<(String, Vec<&str>)> = vec![("d2c".into(), vec!["--help"])];
    for s in SUBCOMMANDS {
        all.push((s.into(), vec![s, "--help"]));
    }
    for (name, args) in all {
        let out = d2c(&args);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let path = dir.join(format!("{name}.txt"));
        if std::env::var_os("D2C_BLESS").is_some() {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
        assert_eq!(text, golden, "help for {name} changed");
    }
}

#[test]
fn missing_artifact_exits_3_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = d2c(&["score", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    let line = err.lines().last().unwrap();
    assert!(
        line.starts_with("error kind=missing-artifact code=3 message="),
        "{line}"
    );
    assert!(line.contains("train.d2cd"), "{line}");
}

#[test]
fn unknown_config_key_exits_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = d2c(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr(&out).lines().last().unwrap().to_string();
    assert!(line.starts_with("error kind=config code=2"), "{line}");
    assert!(line.contains("/train/stepz"), "{line}");
}

#[test]
fn semantic_config_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"p_null": 1.5}}"#).unwrap();
    let out = d2c(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn corrupted_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = smoke();
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", d]);
    let path = dir.path().join("train.d2cd");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let out = d2c(&["train-ref", "--config", cfg.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(3));
    let line = stderr(&out).lines().last().unwrap().to_string();
    assert!(line.starts_with("error kind=bad-artifact code=3"), "{line}");
    assert!(line.contains("checksum"), "{line}");
}

/// One class of ten samples whose scores are 0.1, 0.2, ..., 1.0, stored
/// out of order.
fn ten_score_fixture(dir: &Path) {
    let n = 10;
    let data = LabeledDataset {
        kind: DatasetKind::Gauss2d,
        samples: Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap(),
        labels: vec![0; n],
        classes: 1,
        difficulty: vec![0.0; n],
        class_names: vec!["c0".into()],
        seed: 0,
    };
    let order = [7, 2, 9, 0, 4, 1, 8, 3, 6, 5];
    let table = ScoreTable {
        scores: order.iter().map(|&i| (i + 1) as f64 / 10.0).collect(),
        indices: order.to_vec(),
        labels: vec![0; n],
        mc: McConfig::default(),
        model_fingerprint: 0,
        warnings: Vec::new(),
    };
    std::fs::write(dir.join("train.d2cd"), format::encode_dataset(&data).unwrap()).unwrap();
    std::fs::write(dir.join("scores.d2cs"), format::encode_scores(&table)).unwrap();
}

#[test]
fn interval_select_on_fixture_takes_every_third_score() {
    let dir = tempfile::tempdir().unwrap();
    ten_score_fixture(dir.path());
    let d = dir.path().to_str().unwrap();
    ok(&[
        "select",
        "--strategy",
        "interval",
        "--k",
        "3",
        "--budget",
        "3",
        "--out",
        d,
    ]);
    let csv = std::fs::read_to_string(dir.path().join("selection.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,global_index,rank_in_class,score"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let ranks: Vec<&str> = rows.iter().map(|r| r[2]).collect();
    let indices: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(scores, vec![0.1, 0.4, 0.7]);
    assert_eq!(ranks, vec!["0", "3", "6"]);
    assert_eq!(indices, vec!["0", "3", "6"]);
    let manifest = std::fs::read_to_string(dir.path().join("select.manifest.json")).unwrap();
    assert!(manifest.contains("scores.d2cs") && manifest.contains("selection.csv"));
}

#[test]
fn infeasible_stride_is_a_config_level_error() {
    let dir = tempfile::tempdir().unwrap();
    ten_score_fixture(dir.path());
    let d = dir.path().to_str().unwrap();
    let out = d2c(&[
        "select",
        "--strategy",
        "interval",
        "--k",
        "5",
        "--budget",
        "3",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn chained_stages_reproduce_the_compare_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let cfg = smoke();
    let c = cfg.to_str().unwrap();
    for stage in [
        "gen-data",
        "train-ref",
        "score",
        "select",
        "attach",
        "train",
        "sample",
        "eval",
    ] {
        ok(&[stage, "--config", c, "--seed", "0", "--out", r]);
        let manifest = run.join(format!("{stage}.manifest.json"));
        assert!(manifest.is_file(), "{stage} wrote no manifest");
        assert!(run.join(format!("{stage}.config.json")).is_file());
    }
    let cmp = dir.path().join("cmp");
    ok(&[
        "compare",
        "--config",
        c,
        "--seed",
        "0",
        "--strategy",
        "interval",
        "--out",
        cmp.to_str().unwrap(),
    ]);
    let chained = std::fs::read(run.join("metrics.csv")).unwrap();
    let compared = std::fs::read(cmp.join("comparison.csv")).unwrap();
    assert_eq!(
        String::from_utf8(chained).unwrap(),
        String::from_utf8(compared).unwrap()
    );
}

#[test]
fn smoke_compare_writes_table_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    ok(&[
        "compare",
        "--config",
        smoke().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains(",ok,")), "{csv}");
    for f in ["k_sweep.csv", "strategies.csv", "train_curves.csv"] {
        let body = std::fs::read_to_string(out.join("plot").join(f)).unwrap();
        assert!(body.lines().count() > 1, "{f} is empty");
    }
}

#[test]
fn harness_rerun_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&smoke()).unwrap();
    cfg.eval.seeds = vec![0, 1, 2];
    cfg.eval.budgets = vec![3, 5];
    let first = Harness::new(Some(dir.path().to_path_buf())).unwrap();
    let a = first.run_comparison(&cfg).unwrap();
    assert_eq!(
        a.rows.len(),
        cfg.eval.grid.len() * cfg.eval.budgets.len() * cfg.eval.seeds.len()
    );
    assert!(a.rows.iter().all(|r| r.status == "ok"));
    // One reference and one scoring per seed, shared by every cell.
    assert_eq!(
        first
            .stats
            .reference_trainings
            .load(std::sync::atomic::Ordering::Relaxed),
        3
    );
    let second = Harness::new(Some(dir.path().to_path_buf())).unwrap();
    let b = second.run_comparison(&cfg).unwrap();
    assert_eq!(second.stats.trainings(), 0, "{}", second.stats.summary());
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn cell_failures_become_rows() {
    let mut cfg = RunConfig::load(&smoke()).unwrap();
    cfg.eval.budgets = vec![5];
    // Stride 9 does not fit five picks out of twenty.
    cfg.eval.grid[0].k = Some(vec![4, 9]);
    let t = Harness::new(None).unwrap().run_comparison(&cfg).unwrap();
    let status: Vec<&str> = t.rows.iter().map(|r| r.status.as_str()).collect();
    assert_eq!(status, vec!["ok", "failed", "ok"]);
    assert!(!t.rows[1].error.is_empty());
}
