use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmo-petasim"))
        .args(args)
        .env_remove("FMO_PETASIM_PRESET_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn predict_peta_machine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let out = run(&[
        "predict",
        "--nf",
        "100000",
        "--machine",
        "peta-2007",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let v = read_json(&path);
    assert!(rel(v["elapsed_seconds"].as_f64().unwrap(), 1.887e4) < 0.01);
    assert_eq!(v["effective_flops"].as_f64().unwrap(), 5e14);
    assert_eq!(v["pair_array_bytes"].as_f64().unwrap(), 4e10);
    assert!(stdout(&out).contains("0.5000 PF"));
}

#[test]
fn predict_with_measured_shape() {
    let out = run(&[
        "predict", "--nf", "106", "--im", "17", "--nd", "690", "--nes", "4875",
    ]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = v["elapsed_seconds"].as_f64().unwrap();
    assert!((t - 3968.293).abs() < 1e-3, "{t}");
}

#[test]
fn predict_single_fragment_has_no_dimers() {
    let out = run(&["predict", "--nf", "1"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["work"]["f_d"].as_f64().unwrap(), 0.0);
    assert_eq!(v["work"]["f_es"].as_f64().unwrap(), 0.0);
    assert_eq!(v["shape"]["n_d"], 0);
}

#[test]
fn unknown_preset_and_bad_arguments_exit_4() {
    assert_eq!(
        code(&run(&["predict", "--nf", "10", "--machine", "nope"])),
        4
    );
    assert_eq!(code(&run(&["predict", "--nf", "0"])), 4);
    assert_eq!(code(&run(&["predict"])), 4);
    assert_eq!(code(&run(&["sweep", "--nf-min", "10", "--nf-max", "5"])), 4);
    assert_eq!(code(&run(&["simulate"])), 4);
}

#[test]
fn calibrate_bundled_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    let out = run(&["calibrate", "--output", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let v = read_json(&path);
    let p = &v["params"];
    for (key, want) in [
        ("f_m0", 0.59),
        ("f_m1", 0.0014),
        ("f_d0", 2.83),
        ("f_d1", 0.0039),
        ("f_es0", 0.082),
    ] {
        assert!(rel(p[key].as_f64().unwrap(), want) < 0.2, "{key}");
    }
    assert!(rel(v["efficiencies"]["xeon"].as_f64().unwrap(), 0.071) < 0.2);
}

#[test]
fn calibrate_synthetic_round_trip() {
    let out = run(&[
        "calibrate",
        "--synthetic",
        "--seed",
        "5",
        "--output",
        "/dev/null",
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("exact recovery"), "{}", stdout(&out));
}

#[test]
fn calibrate_malformed_csv_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "machine_id,k,n_f,i_m,n_d,n_es,t_monomer,t_scf_dimer,t_es_dimer,t_total\n\
         ibm,1,106,17,690,4875,1356,2037,398,3799\n\
         ibm,1,oops,17,690,4875,1356,2037,398,3799\n",
    )
    .unwrap();
    let out = run(&["calibrate", "--records", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn calibrate_single_shape_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.csv");
    std::fs::write(
        &path,
        "machine_id,k,n_f,i_m,n_d,n_es,t_monomer,t_scf_dimer,t_es_dimer,t_total\n\
         ibm,1,106,17,690,4875,1356,2037,398,3799\n",
    )
    .unwrap();
    assert_eq!(
        code(&run(&["calibrate", "--records", path.to_str().unwrap()])),
        3
    );
}

#[test]
fn simulate_lc_workflow_reports_overhead() {
    let out = run(&[
        "simulate",
        "--workflow",
        "lc-fmo-1cew",
        "--machine",
        "xeon-16",
        "--output",
        "/dev/null",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let ratio: f64 = text
        .split("overhead ratio ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 1.095).abs() <= 0.02);
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let go = |seed: &str, name: &str| {
        let report = dir.path().join(format!("{name}.json"));
        let timeline = dir.path().join(format!("{name}.csv"));
        let out = run(&[
            "simulate",
            "--nf",
            "30",
            "--im",
            "3",
            "--machine",
            "xeon-16",
            "--jitter",
            "0.3",
            "--seed",
            seed,
            "--timeline",
            timeline.to_str().unwrap(),
            "--output",
            report.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        (
            std::fs::read(report).unwrap(),
            std::fs::read(timeline).unwrap(),
        )
    };
    let a = go("9", "a");
    let b = go("9", "b");
    let c = go("10", "c");
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
    assert!(String::from_utf8_lossy(&a.1).starts_with("time,worker,task,kind,event\n"));
}

#[test]
fn simulate_peta_is_efficient() {
    let out = run(&["simulate", "--nf", "100000", "--machine", "peta-2007"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["efficiency"].as_f64().unwrap() >= 0.95);
}

#[test]
fn simulate_cyclic_workflow_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cycle.json");
    std::fs::write(
        &path,
        r#"{"name":"loop","modules":[
            {"name":"a","body":{"fixed":{"seconds":1.0}}},
            {"name":"b","body":{"fixed":{"seconds":1.0}}}],
           "edges":[["a","b"],["b","a"]]}"#,
    )
    .unwrap();
    let out = run(&["simulate", "--workflow", path.to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_toy_fixtures_against_oracle() {
    for (system, tol) in [("pair", 1e-9), ("chain-20", 1e-3)] {
        let out = run(&["run-toy", "--system", system, "--oracle"]);
        assert_eq!(code(&out), 0);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        let err = v["relative_error"].as_f64().unwrap();
        assert!(err < tol, "{system}: {err}");
    }
}

#[test]
fn run_toy_forced_non_convergence_exits_6() {
    let out = run(&["run-toy", "--system", "chain-20", "--max-iterations", "1"]);
    assert_eq!(code(&out), 6);
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not converge"));
}

#[test]
fn sweep_csv_rows() {
    let out = run(&[
        "sweep",
        "--nf-min",
        "500",
        "--nf-max",
        "500",
        "--machine",
        "peta-2007",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "nf,f_m,f_d,f_es,f_total,t_predict,t_simulated");
    assert_eq!(lines.len(), 2);
}

#[test]
fn sweep_row_matches_predict() {
    let sweep = run(&[
        "sweep",
        "--nf-min",
        "1000",
        "--nf-max",
        "100000",
        "--steps",
        "5",
        "--machine",
        "peta-2007",
        "--format",
        "json",
    ]);
    assert_eq!(code(&sweep), 0);
    let rows: Value = serde_json::from_slice(&sweep.stdout).unwrap();
    let last = rows.as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["nf"], 100000);
    let pred = run(&["predict", "--nf", "100000", "--machine", "peta-2007"]);
    let v: Value = serde_json::from_slice(&pred.stdout).unwrap();
    assert_eq!(last["t_predict"], v["elapsed_seconds"]);
}

#[test]
fn csv_format_for_key_value_output() {
    let out = run(&["predict", "--nf", "100", "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.starts_with("key,value\n"));
    assert!(text.contains("shape.n_d,750"));
}
