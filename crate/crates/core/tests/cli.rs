use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use posflow::scenario::{parse_scenario, parse_scenario_str};
use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_posflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    (output.status.code().unwrap_or(-1), String::from_utf8_lossy(&output.stderr).into_owned())
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn all_gates_pass(r: &Value) -> bool {
    r["gates"].as_array().unwrap().iter().all(|g| g["pass"] == Value::Bool(true))
}

#[test]
fn simulate_conserves_mass_on_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("loop.toml");
    let (code, _) = run(&["simulate", "--scenario", path.to_str().unwrap()], dir.path());
    assert_eq!(code, 0);
    let r = report(dir.path());
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["command"], "simulate");
    let m0 = r["metrics"]["initial_mass"].as_f64().unwrap();
    for m in r["metrics"]["snapshot_masses"].as_array().unwrap() {
        assert!((m.as_f64().unwrap() - m0).abs() <= 1e-8 * m0);
    }
    let snaps = fs::read_to_string(dir.path().join("snapshots.csv")).unwrap();
    let mut lines = snaps.lines();
    assert_eq!(lines.next(), Some("# posflow-csv v1 snapshots"));
    assert_eq!(lines.next(), Some("time,edge,x,v,value"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 5);
    assert!(first[4].parse::<f64>().is_ok());
    let traces = fs::read_to_string(dir.path().join("traces.csv")).unwrap();
    assert_eq!(traces.lines().nth(1), Some("time,vertex,v,value"));
}

#[test]
fn large_kernel_fails_the_characteristic_gate() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("large_kernel.toml");
    let (code, stderr) = run(&["check", "--scenario", path.to_str().unwrap()], dir.path());
    assert_ne!(code, 0);
    assert!(stderr.contains("characteristic gate"), "{stderr}");
    let r = report(dir.path());
    let failed: Vec<&Value> = r["gates"].as_array().unwrap().iter().filter(|g| g["pass"] == Value::Bool(false)).collect();
    assert!(failed.iter().any(|g| g["name"] == "characteristic gate"));
}

#[test]
fn exit_status_follows_the_gates() {
    for sc in ["loop.toml", "two_vertex.toml", "large_kernel.toml"] {
        for cmd in ["check", "spectrum", "simulate"] {
            let dir = tempfile::tempdir().unwrap();
            let path = scenario(sc);
            let (code, _) = run(&[cmd, "--scenario", path.to_str().unwrap()], dir.path());
            let r = report(dir.path());
            assert_eq!(code == 0, all_gates_pass(&r), "{cmd} on {sc} exited {code}");
            assert_eq!(r["scenario_hash"].as_str().unwrap().len(), 64);
        }
    }
}

#[test]
fn oracle_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let path = scenario("two_vertex.toml");
    for dir in [&a, &b] {
        let (code, _) = run(&["oracle", "--scenario", path.to_str().unwrap(), "--seed", "5"], dir.path());
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(a.path().join("report.json")).unwrap(), fs::read(b.path().join("report.json")).unwrap());
    assert_eq!(report(a.path())["seed"], 5);
}

#[test]
fn admissibility_honours_grid_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("loop.toml");
    let (code, _) = run(
        &["admissibility", "--scenario", path.to_str().unwrap(), "--p", "2", "--tau-grid", "0.4,0.2,0.1,0.05,0.025"],
        dir.path(),
    );
    assert_eq!(code, 0);
    let r = report(dir.path());
    assert!(all_gates_pass(&r));
    let spec = tempfile::tempdir().unwrap();
    let (code, _) = run(&["spectrum", "--scenario", path.to_str().unwrap(), "--mu-grid", "0.5:10:12"], spec.path());
    assert_eq!(code, 0);
    let csv = fs::read_to_string(spec.path().join("spectrum.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 12);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nhorizon = [\n").unwrap();
    let (code, stderr) = run(&["simulate", "--scenario", bad.to_str().unwrap()], dir.path());
    assert_eq!(code, 2);
    assert!(stderr.contains("line"), "{stderr}");
    let (code, _) = run(&["simulate", "--scenario", "/nonexistent/scenario.toml"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn bundled_scenarios_parse() {
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")).unwrap() {
        let path = entry.unwrap().path();
        let sc = parse_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(parse_scenario_str(&text).unwrap().hash, sc.hash);
    }
}
