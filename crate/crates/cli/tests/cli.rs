use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "design.n0=200",
    "--set",
    "mc.per_period=100",
    "--set",
    "mc.num_periods=3",
    "--set",
    "mc.time_points=2,3",
    "--set",
    "mc.bootstrap=20",
];

fn adaptrial(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptrial"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ADAPTRIAL_THREADS")
        .output()
        .unwrap()
}

fn small(out: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = adaptrial(out, &args);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn montecarlo_writes_ten_replicate_metrics() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path(), "montecarlo", &["--set", "reps=10", "--set", "design.kind=standard_neyman"]);
    let rows = csv(&dir.path().join("metrics.csv"));
    let reps = rows[0].iter().position(|h| h == "reps").unwrap();
    assert_eq!(rows.len(), 1 + 4 * 2);
    assert!(rows[1..].iter().all(|r| r[reps] == "10" && r[1] == "standard_neyman"));
    assert!(dir.path().join("relvar.csv").exists());
}

#[test]
fn estimate_reads_a_simulated_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small(dir.path(), "simulate", &["--seed", "3"]);
    assert_eq!(String::from_utf8_lossy(&sim.stdout).lines().count(), 2);
    let traj = dir.path().join("trajectory.csv");
    let est_dir = dir.path().join("est");
    small(&est_dir, "estimate", &["--input", traj.to_str().unwrap()]);
    let rows = csv(&est_dir.join("estimates.csv"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names.len(), 4);
    for r in &rows[1..] {
        assert_eq!(r[1], "400");
        let (psi, lo, hi): (f64, f64, f64) = (r[2].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!(lo < psi && psi < hi);
    }
}

#[test]
fn table1_has_the_row_schema() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path(), "table1", &["--set", "reps=4"]);
    let rows = csv(&dir.path().join("table1.csv"));
    assert_eq!(rows[0].join(","), "design,time,bias,var,mse,cov,oracle_cov");
    let designs: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(designs, ["benefit_driven", "benefit_driven", "standard_neyman", "standard_neyman"]);
    assert!(rows[1..].iter().all(|r| r.len() == 7 && r[1..].iter().all(|v| v.parse::<f64>().is_ok())));
}

#[test]
fn echoed_config_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    small(&first, "simulate", &["--set", "design.b=0.3333333333333333", "--set", "estimator.alpha=0.1"]);
    let echo = first.join("config.txt");
    let second = dir.path().join("b");
    let o = adaptrial(&second, &["simulate", "--config", echo.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(&echo).unwrap(), fs::read(second.join("config.txt")).unwrap());
    assert_eq!(fs::read(first.join("trajectory.csv")).unwrap(), fs::read(second.join("trajectory.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| adaptrial(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["simulate", "--set", "design.nope=1"]), 1);
    assert_eq!(code(&["simulate", "--set", "kind=appendix_b"]), 1);
    assert_eq!(code(&["simulate", "--set", "mc.reps=zero"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["estimate", "--input", "/nonexistent/t.csv"]), 1);
    let all_treated = dir.path().join("treated.csv");
    let mut body = String::from("unit_index,w,a,y,g_prob,design_kind,design_params\n");
    for i in 1..=40 {
        body += &format!("{i},{},1,{},1,constant,1\n", 0.07 * i as f64, 20.0 + 0.1 * i as f64);
    }
    fs::write(&all_treated, body).unwrap();
    assert_eq!(code(&["estimate", "--input", all_treated.to_str().unwrap()]), 2);
    let err = adaptrial(dir.path(), &["simulate", "--set", "design.nope=1"]);
    assert!(String::from_utf8_lossy(&err.stderr).contains("design.nope"));
}
