use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riskset::io::save_dataset;
use riskset::simulation::{synth_generate, ProbLaw, SyntheticSpec};
use riskset::QaRecord;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskset"));
    cmd.env_clear();
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path, n: usize) -> PathBuf {
    let spec = SyntheticSpec {
        n_questions: n,
        max_samples: 20,
        correct_prob: ProbLaw::Uniform { lo: 0.3, hi: 0.9 },
        distractor_count: 3,
        seed: 11,
    };
    let path = dir.join("data.jsonl");
    save_dataset(&synth_generate(&spec).unwrap(), &path).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn column(path: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

#[test]
fn calibrate_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 60);
    let calib = dir.path().join("calib.json");
    let data_s = data.to_str().unwrap();
    let o = run(&[
        "calibrate",
        "--data",
        data_s,
        "--alpha",
        "0.2",
        "--beta",
        "0.2",
        "--out",
        calib.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&calib).unwrap()).unwrap();
    let r_hat = c["sample_budget"].as_u64().unwrap();
    assert!(r_hat >= 1);
    assert!((c["budget"]["epsilon"].as_f64().unwrap() - 0.36).abs() < 1e-12);

    let o = run(&["predict", "--data", data_s, "--calibration", calib.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    for l in &lines {
        let raw = l["raw"].as_array().unwrap();
        let dedup = l["dedup"].as_array().unwrap();
        assert_eq!(l["raw_size"].as_u64().unwrap() as usize, raw.len());
        assert!(dedup.len() <= raw.len());
        assert!(raw.iter().all(|m| m["index"].as_u64().unwrap() < r_hat));
    }
}

#[test]
fn empty_sets_are_emitted_as_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let rec = QaRecord::new("x", "q", vec!["a".into(), "b".into()], None);
    save_dataset(&[rec], &data).unwrap();
    let calib = dir.path().join("c.json");
    std::fs::write(
        &calib,
        r#"{"sample_budget":2,"threshold":0.0,"budget":{"alpha":0.1,"beta":0.1},"calibration_size":10,
            "provenance":{"seed":null,"split_ratio":null,"measure":"frequency","oracle":"exact"}}"#,
    )
    .unwrap();
    let out = dir.path().join("sets.jsonl");
    let o = run(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--calibration",
        calib.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(line["raw"], serde_json::json!([]));
    assert_eq!(line["dedup"], serde_json::json!([]));
    assert_eq!(line["raw_size"], 0);
}

#[test]
fn short_record_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    save_dataset(&[QaRecord::new("short-one", "q", vec!["a".into()], None)], &data).unwrap();
    let calib = dir.path().join("c.json");
    std::fs::write(
        &calib,
        r#"{"sample_budget":3,"threshold":0.5,"budget":{"alpha":0.1,"beta":0.1},"calibration_size":10,
            "provenance":{"seed":null,"split_ratio":null,"measure":"frequency","oracle":"exact"}}"#,
    )
    .unwrap();
    let o = run(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--calibration",
        calib.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("short-one"), "{}", stderr(&o));
}

#[test]
fn sweep_single_point_writes_one_row_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 40);
    let out = dir.path().join("sweep.csv");
    let o = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--alpha",
        "0.2",
        "--beta",
        "0.2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 1);
    assert_eq!(csv_rows(&dir.path().join("sweep.aggregate.csv")).len(), 1);
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["command"], "sweep");
}

#[test]
fn beta_grid_epsilon_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 60);
    let out = dir.path().join("s.csv");
    let o = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--alpha",
        "0.1",
        "--beta",
        "0.1:0.3:0.1",
        "--trials",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 6);
    let (b, e) = (column(&out, "beta"), column(&out, "epsilon"));
    for r in &rows {
        let beta: f64 = r[b].parse().unwrap();
        let eps: f64 = r[e].parse().unwrap();
        assert!((eps - (0.1 + beta - 0.1 * beta)).abs() < 1e-12);
    }
}

#[test]
fn infeasible_point_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20);
    let out = dir.path().join("s.csv");
    let o = run(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--alpha",
        "0.01,0.3",
        "--beta",
        "0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    let status = column(&out, "status");
    assert!(rows[0][status].starts_with("infeasible"), "{:?}", rows[0]);
    assert_eq!(&rows[1][status], "ok");
    assert!(rows[0][column(&out, "stage1_eer")].is_empty());
}

#[test]
fn simulate_degenerate_law_and_determinism() {
    let args = [
        "simulate",
        "--correct-prob",
        "fixed:1",
        "--trials",
        "5",
        "--n-questions",
        "40",
        "--seed",
        "3",
    ];
    let a = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("stage-1 EER 0.0000"), "{text}");
    assert!(text.contains("verdict: PASS"));
    assert_eq!(text, stdout(&run(&args)));
}

#[test]
fn simulate_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let o = run(&[
        "simulate",
        "--trials",
        "4",
        "--n-questions",
        "40",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 4);
}

#[test]
fn dedup_report_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 100);
    let out = dir.path().join("d.csv");
    let o = run(&[
        "dedup-report",
        "--data",
        data.to_str().unwrap(),
        "--alpha",
        "0.1",
        "--epsilon",
        "0.15:0.55:0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 9);
    let (raw, dd) = (column(&out, "apss_raw"), column(&out, "apss_dedup"));
    let mut last = f64::INFINITY;
    for r in &rows {
        let (raw, dd): (f64, f64) = (r[raw].parse().unwrap(), r[dd].parse().unwrap());
        assert!(dd <= raw);
        assert!(dd <= last);
        last = dd;
    }

    let o = run(&[
        "dedup-report",
        "--data",
        data.to_str().unwrap(),
        "--epsilon",
        "0.3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 1);
}

#[test]
fn config_file_and_env_fill_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 40);
    let out = dir.path().join("s.csv");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "data = {:?}\nalpha = [0.2, 0.3]\nbeta = 0.25\ntrials = 2\nout = {:?}\n",
            data.to_str().unwrap(),
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 4);

    // flag beats file
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--alpha", "0.2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 2);

    // environment beats file
    let o = bin()
        .args(["sweep", "--config", cfg.to_str().unwrap()])
        .env("RISKSET_TRIALS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 6);
}

#[test]
fn fatal_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\":\"a\",\"question\":\"q\",\"samples\":[\"x\"]}\nnot json\n",
    )
    .unwrap();
    let o = run(&["calibrate", "--data", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let data = dataset(dir.path(), 20);
    let o = run(&["sweep", "--data", data.to_str().unwrap(), "--oracle", "fuzzy"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown oracle"));

    let o = run(&["sweep", "--data", data.to_str().unwrap(), "--alpha", "1.5"]);
    assert!(!o.status.success());
    assert!(!run(&["calibrate"]).status.success());
}
