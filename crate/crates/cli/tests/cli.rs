use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmi_core::design::{generate_design, Design, DesignConfig};

fn cmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmi")).args(args).output().expect("run cmi")
}

fn write_design_csv(path: &Path, design: Design, n: usize) {
    let data = generate_design(&DesignConfig::new(design, n, 11)).unwrap();
    let mut s = String::from("x,wl,wh\n");
    for i in 0..data.n() {
        let w = data.w().row(i);
        s.push_str(&format!("{},{},{}\n", data.x().get(i, 0), w[0], w[1]));
    }
    fs::write(path, s).unwrap();
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn test_command_rejects_far_outside_and_accepts_inside() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_design_csv(&csv, Design::D1, 300);
    let c = csv.to_str().unwrap();
    for method in ["estimated", "conservative"] {
        let inside = json(&cmi(&["test", "--data", c, "--theta", "0.0,0.1", "--method", method, "--draws", "200"]));
        assert_eq!(inside["outcome"]["reject"], false, "{method}");
        let outside = json(&cmi(&["test", "--data", c, "--theta", "1.0,0.1", "--method", method, "--draws", "200"]));
        assert_eq!(outside["outcome"]["reject"], true, "{method}");
    }
    let a = cmi(&["test", "--data", c, "--theta", "0.0,0.1", "--seed", "3", "--draws", "200"]);
    let b = cmi(&["test", "--data", c, "--theta", "0.0,0.1", "--seed", "3", "--draws", "200"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn plugin_and_median_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_design_csv(&csv, Design::D1, 300);
    let c = csv.to_str().unwrap();
    let p = json(&cmi(&["test", "--data", c, "--theta", "0.1,0.1", "--method", "plugin", "--draws", "200", "--sims", "300"]));
    assert!(p["outcome"]["branch"].is_string());
    let m = json(&cmi(&["test", "--data", c, "--model", "median", "--theta", "0.0,0.1", "--draws", "200"]));
    assert!(m["outcome"]["statistic"].as_f64().unwrap() >= 0.0);
}

#[test]
fn region_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let out = dir.path().join("r.csv");
    write_design_csv(&csv, Design::D1, 200);
    let o = cmi(&[
        "region", "--data", csv.to_str().unwrap(), "--grid", "-0.5:0.5:0.25", "--fix", "1=0.1", "--method", "conservative",
        "--draws", "200", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "theta0,theta1,reject,statistic,critical_value");
    assert_eq!(lines.len(), 6);
    // the true parameter (0, 0.1) is accepted and 0.5 is far outside
    assert!(lines[3].starts_with("0,0.1,false"), "{}", lines[3]);
    assert!(lines[5].starts_with("0.5,0.1,true"), "{}", lines[5]);
    // two free parameters on a 2-D grid
    let o = cmi(&["region", "--data", csv.to_str().unwrap(), "--grid", "-0.5:0.5:0.5", "--grid", "0:0.2:0.1", "--draws", "100"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 10);
}

#[test]
fn montecarlo_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = cmi(&[
        "montecarlo", "--design", "2", "--n", "100", "--reps", "5", "--alpha", "0.05,0.1", "--methods", "conservative,estimated",
        "--draws", "100", "--lengths", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r["coverage"].as_array().unwrap().len(), 4);
    assert_eq!(r["lengths"].as_array().unwrap().len(), 4);
    assert_eq!(r["reps"], 5);
    assert!(r["config"]["rate_plan"]["draws"] == 100);
}

#[test]
fn simulate_z_and_hist_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    fs::write(
        &params,
        r#"{"d_y": 1, "points": [{"x_k": [0.5], "f_hat": 0.5,
            "m2_hat": {"rows": 1, "cols": 1, "data": [0.3]},
            "v_hats": [{"rows": 1, "cols": 1, "data": [5.0]}], "active": [0]}]}"#,
    )
    .unwrap();
    let o = cmi(&["simulate-z", "--params", params.to_str().unwrap(), "--sims", "50", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.lines().skip(1).all(|l| l.parse::<f64>().unwrap() <= 0.0));

    let o = cmi(&["hist", "--design", "1", "--beta", "0.6", "--n", "100,200", "--reps", "40", "--bins", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("n,beta,lo,hi,count,density"));
}

#[test]
fn pretest_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let out = dir.path().join("p.json");
    write_design_csv(&csv, Design::D1, 1000);
    let o = cmi(&["pretest", "--data", csv.to_str().unwrap(), "--theta", "0.105,0.1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(r["passes"].is_boolean());
    assert_eq!(r["report"]["components"].as_array().unwrap().len(), 2);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_design_csv(&csv, Design::D1, 50);
    let c = csv.to_str().unwrap();
    // wrong parameter count
    assert_eq!(cmi(&["test", "--data", c, "--theta", "0.1"]).status.code(), Some(2));
    // missing file
    assert_eq!(cmi(&["test", "--data", "/nonexistent.csv", "--theta", "0,0"]).status.code(), Some(2));
    // bad grid
    assert_eq!(cmi(&["region", "--data", c, "--grid", "1:0:0.1", "--fix", "1=0"]).status.code(), Some(2));
    // unknown design and unknown flag
    assert_eq!(cmi(&["montecarlo", "--design", "3", "--n", "100"]).status.code(), Some(2));
    assert_eq!(cmi(&["hist", "--bogus"]).status.code(), Some(2));
    // alpha out of range
    assert_eq!(cmi(&["test", "--data", c, "--theta", "0,0", "--alpha", "1.5"]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,wl,wh\n0.1,abc,1\n").unwrap();
    assert_eq!(cmi(&["test", "--data", bad.to_str().unwrap(), "--theta", "0,0"]).status.code(), Some(2));
}
