use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DGP: &str = "K = 2\np0 = 0.7, 0.3\np1 = 0.3, 0.7\ng = 1, -0.5\nerror = gaussian 1.0\n";

fn polyiv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyiv"))
        .current_dir(dir)
        .args(args)
        .env_remove("POLYIV_THREADS")
        .output()
        .expect("run polyiv")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dgp.cfg"), DGP).unwrap();
    let out = polyiv(dir.path(), &["simulate", "--dgp", "dgp.cfg", "--n", "4000", "--seed", "9", "--output", "d.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

#[test]
fn estimate_with_inference_reports_intervals() {
    let dir = setup();
    let out = polyiv(dir.path(), &["estimate", "--input", "d.csv", "--radius", "10", "--infer", "--level", "0.95"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["command"], "estimate");
    assert_eq!(v["config"]["radius"], 10.0);
    assert_eq!(v["config"]["solver"]["starts"], 400);
    let hash = v["input_sha256"]["d.csv"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let r = &v["result"];
    let g: Vec<f64> = r["g_tilde"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((g[0] - 1.0).abs() < 0.3 && (g[1] + 0.5).abs() < 0.3, "{g:?}");
    assert_eq!(r["cov"].as_array().unwrap().len(), 2);
    let ci = r["ci"].as_array().unwrap();
    assert_eq!(ci.len(), 2);
    assert!(ci[0]["lower"].as_f64().unwrap() < g[0] && g[0] < ci[0]["upper"].as_f64().unwrap());
    assert!(stderr(&out).contains("g_tilde"));
}

#[test]
fn degenerate_instrument_exits_one() {
    let dir = setup();
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    let mut only_w0 = format!("{}\n", lines.next().unwrap());
    for line in lines.filter(|l| l.ends_with(",0")) {
        only_w0.push_str(line);
        only_w0.push('\n');
    }
    std::fs::write(dir.path().join("w0.csv"), only_w0).unwrap();
    let out = polyiv(dir.path(), &["estimate", "--input", "w0.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("instrument degenerate"), "{}", stderr(&out));
}

#[test]
fn empty_candidates_file_is_a_usage_error() {
    let dir = setup();
    std::fs::write(dir.path().join("c.csv"), "").unwrap();
    let out = polyiv(dir.path(), &["partial-set", "--input", "d.csv", "--candidates-file", "c.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn partial_set_reports_per_candidate_criteria() {
    let dir = setup();
    std::fs::write(dir.path().join("c.csv"), "h1,h2\n1,-0.5\n2,0.5\n").unwrap();
    let out = polyiv(dir.path(), &["partial-set", "--input", "d.csv", "--candidates-file", "c.csv", "--t-grid", "16"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = &json(&out)["result"];
    assert_eq!(r["criterion"].as_array().unwrap().len(), 2);
    assert_eq!(r["t_grid"].as_array().unwrap().len(), 16);
    let eta = r["eta"].as_f64().unwrap();
    assert!((eta - 4000f64.powf(-1.0 / 3.0)).abs() < 1e-12);

    let out = polyiv(dir.path(), &["partial-set", "--input", "d.csv", "--candidates-file", "c.csv", "--eta", "0.2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(json(&out)["result"]["members"], serde_json::json!([0]));
}

#[test]
fn usage_errors_exit_two() {
    let dir = setup();
    for args in [
        &["estimate", "--input", "missing.csv"][..],
        &["estimate", "--input", "d.csv", "--level", "1.5"],
        &["estimate", "--input", "d.csv", "--radius", "-1"],
        &["estimate", "--input", "d.csv", "--root-tol", "0"],
        &["estimate", "--bogus"],
        &["study", "--dgp", "dgp.cfg", "--n", "100", "--reps", "0"],
        &["operator-diag", "--f0", "nope.json", "--f1", "nope.json", "--B", "1"],
    ] {
        let out = polyiv(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn identify_flags_an_irrelevant_instrument() {
    let dir = setup();
    std::fs::write(
        dir.path().join("flat.cfg"),
        "K = 3\np0 = 0.5, 0.3, 0.2\np1 = 0.2, 0.6, 0.2\ng = 0, 0, 0\nerror = gaussian 1\n",
    )
    .unwrap();
    let out = polyiv(dir.path(), &["identify", "--dgp", "flat.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("margin 0.000e0 at J={3}"), "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["result"]["relevance"]["min_subset"], serde_json::json!([3]));
    assert_eq!(v["result"]["bezout_bound"], 6);

    let out = polyiv(dir.path(), &["identify", "--input", "d.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn moments_json_has_table_keys_and_output_files() {
    let dir = setup();
    let out = polyiv(dir.path(), &["moments", "--input", "d.csv", "--J", "4", "--output", "m.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    let r = &v["result"];
    assert_eq!(r["K"], 2);
    assert_eq!(r["J"], 4);
    assert_eq!(r["C"].as_array().unwrap().len(), 5);
    let pw: f64 = r["pW"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((pw - 1.0).abs() < 1e-12);
    let table = std::fs::read_to_string(dir.path().join("m.txt")).unwrap();
    assert!(table.starts_with('K'));
}

fn grid_json(values: &[Vec<f64>]) -> String {
    serde_json::json!({ "x_lo": 0.0, "x_hi": 1.0, "u_lo": -2.0, "u_hi": 2.0, "values": values }).to_string()
}

#[test]
fn operator_diag_on_equal_densities() {
    let dir = tempfile::tempdir().unwrap();
    let (nx, nu) = (4usize, 16usize);
    let values: Vec<Vec<f64>> = (0..nx)
        .map(|_| (0..nu).map(|_| 1.0 / 4.0).collect())
        .collect();
    std::fs::write(dir.path().join("f.json"), grid_json(&values)).unwrap();
    let out = polyiv(
        dir.path(),
        &["operator-diag", "--f0", "f.json", "--f1", "f.json", "--B", "0.5", "--family", "pwl:3", "--budget", "200"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = &json(&out)["result"];
    assert_eq!(r["max_abs_entry"], 0.0);
    assert_eq!(r["kernel_margin"], 0.0);
    assert_eq!(r["indicator_search"]["objective"], 0.0);

    let out = polyiv(dir.path(), &["operator-diag", "--f0", "f.json", "--f1", "f.json", "--B", "0.5", "--family", "spline"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn study_writes_records_table() {
    let dir = setup();
    let out = polyiv(
        dir.path(),
        &["study", "--dgp", "dgp.cfg", "--n", "300,600", "--reps", "3", "--output", "s.json"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let records = std::fs::read_to_string(dir.path().join("s.records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 6);
    assert!(records.starts_with("n,rep,g_tilde_1,g_tilde_2"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["summaries"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_is_reproducible_and_threads_env_is_honoured() {
    let dir = setup();
    let a = polyiv(dir.path(), &["simulate", "--dgp", "dgp.cfg", "--n", "50", "--seed", "4"]);
    let b = Command::new(env!("CARGO_BIN_EXE_polyiv"))
        .current_dir(dir.path())
        .args(["simulate", "--dgp", "dgp.cfg", "--n", "50", "--seed", "4"])
        .env("POLYIV_THREADS", "2")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let bad = Command::new(env!("CARGO_BIN_EXE_polyiv"))
        .current_dir(dir.path())
        .args(["simulate", "--dgp", "dgp.cfg", "--n", "5"])
        .env("POLYIV_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
