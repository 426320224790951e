use std::path::Path;
use std::process::{Command, Output};

fn slowman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowman"))
        .args(args)
        .env_remove("SLOWMAN_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn project_linear_matches_oracle() {
    let out = slowman(&[
        "project", "--system", "linear", "--a", "1", "--c", "1", "--eps", "0.01", "--m", "1", "--H-over-eps", "1",
        "--x0", "1", "--tol", "1e-8",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let y = v["output"][0].as_f64().unwrap();
    // root of e2^T A^2 z = 0 for a = c = 1: y = (1 - eps) x
    assert!((y - 0.99).abs() < 1e-8, "{y}");
    assert_eq!(v["status"], "converged");
}

#[test]
fn zero_tolerance_is_a_validation_error() {
    let out = slowman(&["project", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tol"));
}

#[test]
fn bad_flags_and_parameters_are_validation_errors() {
    assert_eq!(slowman(&["project", "--system", "nope"]).status.code(), Some(2));
    assert_eq!(slowman(&["project", "--eps", "0.9"]).status.code(), Some(2));
    assert_eq!(slowman(&["project", "--system", "pair"]).status.code(), Some(2), "theta is required");
    assert_eq!(slowman(&["project", "--H-over-eps", "50"]).status.code(), Some(2));
    assert_eq!(slowman(&["region", "--resolution", "0"]).status.code(), Some(2));
    assert_eq!(slowman(&["project", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn divergent_run_exits_three() {
    // theta = 0.7 pi lies outside the m = 1 sector
    let out = slowman(&["project", "--system", "pair", "--theta", "2.199114857512855", "--m", "1", "--x0", "1", "--seed", "0.1,0.1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["status"], "diverged");
}

#[test]
fn rpm_rescues_the_divergent_case() {
    let out = slowman(&["rpm", "--system", "pair", "--theta", "2.199114857512855", "--m", "1", "--x0", "1", "--seed", "0.1,0.1", "--tol", "1e-10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    // with a = 0, c = 1 the fixed point is y = (x, x)
    for i in 0..2 {
        assert!((v["output"][i].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn iteration_cap_exits_four() {
    let out = slowman(&["project", "--m", "0", "--H-over-eps", "0.01", "--tol", "1e-14", "--max-iters", "3"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&out)["status"], "max-iterations");
}

#[test]
fn region_csv_layout() {
    let out = slowman(&["region", "--mode", "differenced", "--m", "1", "--eta", "1", "--resolution", "8"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("theta,step,abs_mu,stable"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
    assert!(!text.contains('\r'));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = slowman(&[
            "sweep", "--m-values", "0,1", "--threshold-range", "0.5,3", "--m", "0", "--output", path.to_str().unwrap(),
            "--format", "json",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(path).unwrap()
    };
    let a = run("a.json");
    let b = run("b.json");
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let slope = v[1]["summary"]["slope"].as_f64().unwrap();
    assert!((slope - 2.0).abs() < 0.3, "{slope}");
    assert!(v[0]["summary"]["threshold"].as_f64().is_some());
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn config_file_is_strict_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write(&bad, r#"{"command": "project", "tolerance": 1e-8}"#);
    let out = slowman(&["project", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerance"));

    let good = dir.path().join("good.json");
    write(&good, r#"{"system": {"id": "linear", "params": {"a": 1, "c": 2, "eps": 0.01}}, "m": 1, "x0": [1.0]}"#);
    let out = slowman(&["project", "--config", good.to_str().unwrap(), "--c", "1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!((json(&out)["output"][0].as_f64().unwrap() - 0.99).abs() < 1e-8);

    let other = dir.path().join("other.json");
    write(&other, r#"{"command": "region"}"#);
    assert_eq!(slowman(&["project", "--config", other.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn verbose_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let out = slowman(&[
        "cascade", "--system", "mm", "--m", "2", "--H-over-eps", "0.25", "--seed", "0.5", "--verbose", "--output",
        first.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let second = dir.path().join("second.json");
    echoed["output"] = second.to_str().unwrap().into();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &echoed.to_string());
    let out = slowman(&["cascade", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(first).unwrap(), std::fs::read(second).unwrap());
}

#[test]
fn thread_cap_does_not_change_results() {
    let run = |threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_slowman"));
        cmd.args(["region", "--mode", "differenced", "--compare", "--resolution", "6"]);
        match threads {
            Some(t) => cmd.env("SLOWMAN_THREADS", t),
            None => cmd.env_remove("SLOWMAN_THREADS"),
        };
        cmd.output().unwrap()
    };
    let a = run(None);
    let b = run(Some("1"));
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("theta,step,abs_mu_hat,predicted_stable,observed_stable\n"));
    assert_eq!(run(Some("zero")).status.code(), Some(2));
}

#[test]
fn stability_report_for_the_real_eigenvalue() {
    let out = slowman(&["stability", "--m", "1", "--H-over-eps", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["stable"], true);
    let h_max = v["records"][0]["h_max"].as_f64().unwrap();
    // 2^(1/2) eps / |lambda| with |lambda| = 1
    assert!((h_max - 2f64.sqrt() * 0.01).abs() < 1e-15);
}
