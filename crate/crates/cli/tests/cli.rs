use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cusp-induce"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_exit_codes() {
    let o = run(&["validate", "--family", "chebyshev"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["pass"], true);

    let dir = tempfile::tempdir().unwrap();
    let gap = write_config(
        dir.path(),
        "gap.json",
        r#"{"name":"gap","domain":[-1,1],"delta":0.1,
            "branches":[{"interval":[-1,-0.1],"expr":"1 - 2*x^2"},{"interval":[0,1],"expr":"1 - 2*x^2"}],
            "critical_points":[]}"#,
    );
    let o = run(&["validate", "--config", &gap]);
    assert_eq!(code(&o), 2);
    assert!(stdout_json(&o)["error"].as_str().unwrap().contains("gap"));

    let bad = write_config(
        dir.path(),
        "order.json",
        r#"{"name":"bad","domain":[-1,1],"delta":0.1,
            "branches":[{"interval":[-1,0],"expr":"1 - 2*x^2"},{"interval":[0,1],"expr":"1 - 2*x^2"}],
            "critical_points":[{"location":0,"side":"-","order":1.5},{"location":0,"side":"+","order":1.5}]}"#,
    );
    let o = run(&["validate", "--config", &bad]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout_json(&o)["pass"], false);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["validate"])), 2);
    assert_eq!(code(&run(&["orbit", "--family", "nosuch"])), 2);
    assert_eq!(code(&run(&["orbit", "--family", "unimodal", "--param", "a"])), 2);
    assert_eq!(code(&run(&["bogus"])), 2);
    assert_eq!(code(&run(&["scan", "--grid", "a=1:2:0.5"])), 2);
    assert_eq!(code(&run(&["selftest", "--jobs", "0"])), 2);
}

#[test]
fn scan_unimodal_rows() {
    let o = run(&["scan", "--family", "unimodal", "--grid", "a=1.6:2.0:0.1", "--nmax", "40", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("a,star_verdict,star_partial"));
    let last: Vec<&str> = lines[5].split(',').collect();
    assert_eq!(last[0], "2");
    assert_eq!(last[2].parse::<f64>().unwrap(), 0.0);

    let o = run(&["scan", "--family", "unimodal", "--grid", "a=", "--format", "json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o), serde_json::json!([]));
}

#[test]
fn scan_isolates_critical_hits() {
    // a = 1: 0 -> 1 -> 0 lands on the critical point.
    let o = run(&["scan", "--family", "unimodal", "--grid", "a=1,2", "--nmax", "20"]);
    assert_eq!(code(&o), 0);
    let rows = stdout_json(&o);
    assert_eq!(rows[0]["hit_critical"], true);
    assert_eq!(rows[0]["pass"], false);
    assert_eq!(rows[1]["hit_critical"], false);
    assert_eq!(rows[1]["pass"], true);
}

#[test]
fn scan_is_independent_of_jobs() {
    let args = ["scan", "--family", "lorenz", "--grid", "a=1.8,1.9", "--grid", "s=0.5,0.6", "--nmax", "30"];
    let one = run(&[&args[..], &["--jobs", "1"]].concat());
    let two = run(&[&args[..], &["--jobs", "2"]].concat());
    assert_eq!(code(&one), 0);
    assert_eq!(one.stdout, two.stdout);
    assert_eq!(stdout_json(&one).as_array().unwrap().len(), 4);
}

#[test]
fn failing_expansion_aborts_at_hyperbolicity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["pipeline", "--family", "unimodal", "--param", "a=1.9", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let r = stdout_json(&o);
    assert_eq!(r["aborted_at"], "hyperbolicity");
    // Artifacts of the finished stages are kept.
    assert!(out.join("star.json").exists());
    assert!(out.join("hyperbolicity.json").exists());
    assert!(out.join("report.json").exists());
    assert!(!out.join("partition.csv").exists());
}

#[test]
fn stage_commands_stop_early() {
    let o = run(&["star-check", "--family", "chebyshev"]);
    assert_eq!(code(&o), 0);
    let r = stdout_json(&o);
    let stages: Vec<&str> = r["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["orbit", "star-check"]);

    let o = run(&["induce", "--family", "chebyshev", "--delta", "0.2", "--q0", "3"]);
    assert_eq!(code(&o), 0);
    let r = stdout_json(&o);
    assert_eq!(r["stages"][2]["summary"]["fixed"], true);
    assert_eq!(r["stages"][3]["stage"], "induce");

    let o = run(&["orbit", "--family", "chebyshev", "--orbit-n", "5", "--format", "csv"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("# 0-\nn,c_n"));
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["pass"], true);
}

fn lorenz_pipeline(out: &Path, jobs: &str) -> Output {
    run(&[
        "pipeline",
        "--family",
        "lorenz",
        "--m",
        "256",
        "--birkhoff-steps",
        "400000",
        "--birkhoff-m",
        "256",
        "--seed",
        "3",
        "--jobs",
        jobs,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn lorenz_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = lorenz_pipeline(&a, "1");
    let ob = lorenz_pipeline(&b, "2");
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stdout));
    assert_eq!(oa.stdout, ob.stdout);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 15);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let density = fs::read_to_string(a.join("density.csv")).unwrap();
    assert!(density.starts_with("cell_center,density\n"));
    assert_eq!(density.lines().count(), 257);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["pass"], true);
}
