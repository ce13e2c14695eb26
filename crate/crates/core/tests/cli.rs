use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uwb-autocalib"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn pair_csv(points: &[(f64, f64)], skip: Option<(usize, usize)>) -> String {
    let mut s = String::from("i,j,mean_m,std_m,count\n");
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i == j || skip == Some((i, j)) {
                continue;
            }
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            s.push_str(&format!("{i},{j},{d:.15},0.0,5\n"));
        }
    }
    s
}

fn positions(v: &Value) -> Vec<(f64, f64)> {
    v["positions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["x"].as_f64().unwrap(), p["y"].as_f64().unwrap()))
        .collect()
}

fn assert_positions(got: &[(f64, f64)], want: &[(f64, f64)], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g.0 - w.0).abs() <= tol && (g.1 - w.1).abs() <= tol, "{g:?} vs {w:?}");
    }
}

#[test]
fn fit_model_on_identity_data() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: String = (1..=10).map(|d| format!("{d},{d}\n")).collect();
    fs::write(tmp.path().join("s.csv"), format!("true_m,measured_m\n{rows}")).unwrap();
    let out = run(&["fit-model", "--input", "s.csv", "--output", "m.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&tmp.path().join("m.json"));
    assert!((m["slope"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(m["intercept_m"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(m["n_samples"], 10);
    assert!(String::from_utf8_lossy(&out.stdout).contains("slope 1"));
}

#[test]
fn fit_model_single_row_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("s.csv"), "true_m,measured_m\n5,5.4\n").unwrap();
    let out = run(&["fit-model", "--input", "s.csv", "--output", "m.json"], tmp.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn fit_model_parse_error_names_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("s.csv"), "true_m,measured_m\n1,1.3\n2,abc\n").unwrap();
    let out = run(&["fit-model", "--input", "s.csv", "--output", "m.json"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn calibrate_five_anchor_frame() {
    let want = [(0.0, 0.0), (9.0, 0.0), (16.0, 3.0), (13.0, 17.0), (2.0, 19.0)];
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.csv"), pair_csv(&want, None)).unwrap();
    let out = run(&["calibrate", "--input", "d.csv", "--output", "r.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = read_json(&tmp.path().join("r.json"));
    assert_positions(&positions(&r), &want, 1e-6);
    assert_eq!(r["converged"], true);
}

#[test]
fn calibrate_equilateral_with_prior() {
    let s = 6.0;
    let want = [(0.0, 0.0), (s, 0.0), (s / 2.0, s * 3f64.sqrt() / 2.0)];
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.csv"), pair_csv(&want, None)).unwrap();
    fs::write(
        tmp.path().join("prior.json"),
        r#"{"positions": [{"x": 0, "y": 0}, {"x": 5.8, "y": 0.2}, {"x": 3.1, "y": 5.0}]}"#,
    )
    .unwrap();
    let out = run(
        &["calibrate", "--input", "d.csv", "--prior", "prior.json", "--output", "r.json"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got = positions(&read_json(&tmp.path().join("r.json")));
    // The prior fixes the gauge loosely; compare shape through distances.
    let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        assert!((d(got[i], got[j]) - s).abs() < 1e-6);
    }

    let out = run(&["calibrate", "--input", "d.csv", "--output", "r2.json"], tmp.path());
    assert_eq!(code(&out), 0);
    assert_positions(&positions(&read_json(&tmp.path().join("r2.json"))), &want, 1e-6);
}

#[test]
fn calibrate_missing_pair_exits_2() {
    let pts = [(0.0, 0.0), (5.0, 0.0), (1.0, 4.0)];
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.csv"), pair_csv(&pts, Some((2, 1)))).unwrap();
    let out = run(&["calibrate", "--input", "d.csv", "--output", "r.json"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains('2') && stderr(&out).contains('1'), "{}", stderr(&out));
    assert!(!tmp.path().join("r.json").exists());
}

#[test]
fn calibrate_collinear_anchors_stay_on_axis() {
    let pts = [(0.0, 0.0), (5.0, 0.0), (10.0, 0.0)];
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.csv"), pair_csv(&pts, None)).unwrap();
    let out = run(&["calibrate", "--input", "d.csv", "--output", "r.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_positions(&positions(&read_json(&tmp.path().join("r.json"))), &pts, 1e-6);
}

#[test]
fn calibrate_impossible_triangle_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = [(0, 1, 5.0), (0, 2, 1.0), (1, 2, 10.0)];
    let mut csv = String::from("i,j,mean_m,std_m,count\n");
    for (i, j, d) in rows {
        csv.push_str(&format!("{i},{j},{d},0,5\n{j},{i},{d},0,5\n"));
    }
    fs::write(tmp.path().join("d.csv"), csv).unwrap();
    let out = run(&["calibrate", "--input", "d.csv", "--output", "r.json"], tmp.path());
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(stderr(&out).contains("anchor 2"), "{}", stderr(&out));
}

#[test]
fn simulate_default_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--output", "out"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed["n_steps"], 55);
    assert_eq!(read_json(&tmp.path().join("out/config.json")), echoed);

    let trace = fs::read_to_string(tmp.path().join("out/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,node_kind,node_id,true_x,true_y,est_x,est_y,error_m,rotation_error_rad,calibrated"
    );
    let mut flagged: Vec<u32> = lines
        .filter(|l| l.ends_with(",1"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    flagged.dedup();
    assert_eq!(flagged, [10, 20, 30, 40, 50]);

    let summary: Value = read_json(&tmp.path().join("out/summary.json"));
    assert_eq!(summary["calibrations"].as_array().unwrap().len(), 5);

    let out = run(&["summarize", "--input", "out/trace.csv"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let median = printed["anchor_error_m"]["median"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&median));
    assert_eq!(printed["n_steps"], 55);
}

#[test]
fn simulate_seed_and_trigger_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["simulate", "--seed", "3", "--trigger", "threshold:0.3", "--no-bias-correction", "--output", "o"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = read_json(&tmp.path().join("o/config.json"));
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["trigger"], "threshold:0.3");
    assert_eq!(cfg["bias_correction"], false);
}

#[test]
fn simulate_zero_steps_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("s.json"), r#"{"n_steps": 0}"#).unwrap();
    let out = run(&["simulate", "--input", "s.json", "--output", "o"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_steps"));
    assert!(!tmp.path().join("o/trace.csv").exists());
}

#[test]
fn simulate_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("s.json"),
        r#"{"n_steps": 0, "calibration_period": 0, "drift_bound": -1, "k_measurements": 0}"#,
    )
    .unwrap();
    let out = run(&["simulate", "--input", "s.json", "--output", "o"], tmp.path());
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for field in ["n_steps", "calibration_period", "drift_bound", "k_measurements"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }
}

#[test]
fn simulate_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("s.json"), r#"{"n_stepz": 10}"#).unwrap();
    let out = run(&["simulate", "--input", "s.json", "--output", "o"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_stepz"), "{}", stderr(&out));
}

const HEADER: &str = "step,node_kind,node_id,true_x,true_y,est_x,est_y,error_m,rotation_error_rad,calibrated\n";

#[test]
fn summarize_empty_trace_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("t.csv"), HEADER).unwrap();
    let out = run(&["summarize", "--input", "t.csv"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn summarize_single_record() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "\
0,anchor,0,1,1,1,1,0,0.01,0
0,anchor,1,5,1,5.25,1,0.25,0.01,0
0,tag,0,3,3,3.1,3,0.1,0.01,0
";
    fs::write(tmp.path().join("t.csv"), format!("{HEADER}{body}")).unwrap();
    let out = run(&["summarize", "--input", "t.csv"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["min", "q1", "median", "q3", "max"] {
        assert_eq!(s["anchor_error_m"][key].as_f64().unwrap(), 0.25, "{key}");
        assert_eq!(s["tag_error_m"][key].as_f64().unwrap(), 0.1, "{key}");
        assert_eq!(s["rotation_error_rad"][key].as_f64().unwrap(), 0.01, "{key}");
    }
}

#[test]
fn summarize_malformed_trace_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("t.csv"), format!("{HEADER}0,anchor,zero,1,1,1,1,0,0,0\n")).unwrap();
    let out = run(&["summarize", "--input", "t.csv"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn help_documents_commands_and_exit_codes() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in ["fit-model", "calibrate", "simulate", "summarize", "Exit status"] {
        assert!(help.contains(cmd), "{cmd} missing");
    }
    let out = bin().args(["calibrate", "--help"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("i,j,mean_m,std_m,count"));
}
