use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BENCHMARK: &str = r#"
seed = 7
[market]
horizon = 1.0
steps = 100
rate = [[0.0, 0.0]]
theta = [[0.0, 1.0]]
[objective]
mu1 = 1.0
x0 = 1.0
[cone]
kind = "orthant"
dim = 1
[numerics.simulation]
paths = 20000
"#;

const FACTOR: &str = r#"
seed = 8
[market]
horizon = 1.0
steps = 50
rate = [[0.0, 0.05]]
[market.factor]
kappa = 1.0
mean = 0.0
nu = 0.0
y0 = 0.4
theta_base = [0.8]
theta_loading = [0.5]
[objective]
mu1 = 1.0
x0 = 1.0
[cone]
kind = "orthant"
dim = 1
[numerics.bsde]
paths = 4000
"#;

struct Run {
    _dir: TempDir,
    out: PathBuf,
    output: Output,
}

impl Run {
    fn code(&self) -> Option<i32> {
        self.output.status.code()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn table(&self, name: &str) -> Vec<Vec<String>> {
        read_csv(&self.out.join(name))
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![rdr.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()));
    rows
}

fn column(table: &[Vec<String>], name: &str) -> usize {
    table[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn run(config: &str, args: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_conemv")).arg("--config").arg(&cfg).arg("--out").arg(&out).args(args).output().unwrap();
    Run { _dir: dir, out, output }
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn solve_reports_benchmark_values() {
    let r = run(BENCHMARK, &["solve"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("report.csv");
    assert_eq!(t[0], ["strategy", "mean_T", "var_T", "J0"]);
    assert_eq!(t[1][0], "equilibrium");
    assert!((num(&t[1][3]) + 0.70256).abs() < 1e-5);
    assert_eq!(t[2][0], "precommit");
    assert!((num(&t[2][3]) + 1.85914).abs() < 1e-5);
    let policy = r.table("policy.csv");
    assert_eq!(policy.len(), 102);
    assert!((num(&policy[1][column(&policy, "M")]) - 2.0).abs() < 1e-12);
}

#[test]
fn zero_mu1_gives_zero_feedback() {
    let r = run(&BENCHMARK.replace("mu1 = 1.0", "mu1 = 0.0"), &["solve"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("policy.csv");
    let c = column(&t, "c_1");
    assert!(t[1..].iter().all(|row| num(&row[c]) == 0.0));
}

#[test]
fn missing_key_is_a_usage_error_naming_it() {
    let r = run(&BENCHMARK.replace("x0 = 1.0", ""), &["solve"]);
    assert_eq!(r.code(), Some(64));
    assert!(r.stderr().contains("x0"), "{}", r.stderr());
}

#[test]
fn missing_config_and_bad_flags_are_usage_errors() {
    let out = Command::new(env!("CARGO_BIN_EXE_conemv")).arg("solve").output().unwrap();
    assert_eq!(out.status.code(), Some(64));
    let r = run(BENCHMARK, &["solve", "--bogus"]);
    assert_eq!(r.code(), Some(64));
}

#[test]
fn solve_rejects_factor_theta() {
    let r = run(FACTOR, &["solve"]);
    assert_eq!(r.code(), Some(64));
    assert!(r.stderr().contains("bsde"), "{}", r.stderr());
}

#[test]
fn resolved_config_is_written() {
    let r = run(BENCHMARK, &["--seed", "99", "solve"]);
    let text = fs::read_to_string(r.out.join("resolved_config.toml")).unwrap();
    assert!(text.contains("seed = 99"));
    assert!(text.contains("[numerics.spike]"));
}

#[test]
fn simulate_equilibrium_agrees_with_closed_form() {
    let r = run(BENCHMARK, &["simulate", "--dump-paths"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("sim_report.csv");
    let ok = column(&t, "within_3se");
    let q = column(&t, "quantity");
    let checked: Vec<_> = t[1..].iter().filter(|row| ["mean_T", "var_T", "J0"].contains(&row[q].as_str())).collect();
    assert_eq!(checked.len(), 3);
    assert!(checked.iter().all(|row| row[ok] == "true"), "{t:?}");
    assert_eq!(r.table("terminal_wealth.csv").len(), 20_001);
}

#[test]
fn simulate_without_investable_premium_has_zero_variance() {
    let r = run(&BENCHMARK.replace("theta = [[0.0, 1.0]]", "theta = [[0.0, -0.5]]"), &["simulate"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("sim_report.csv");
    let (q, est, se) = (column(&t, "quantity"), column(&t, "estimate"), column(&t, "se"));
    let var = t.iter().find(|row| row[q] == "var_T").unwrap();
    assert_eq!(num(&var[est]), 0.0);
    assert_eq!(num(&var[se]), 0.0);
}

#[test]
fn simulate_is_reproducible() {
    let a = run(BENCHMARK, &["simulate", "--policy", "precommit"]);
    let b = run(BENCHMARK, &["simulate", "--policy", "precommit"]);
    assert_eq!(fs::read(a.out.join("sim_report.csv")).unwrap(), fs::read(b.out.join("sim_report.csv")).unwrap());
}

#[test]
fn policy_file_with_wrong_width_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.csv");
    let mut text = String::from("time,c_1,c_2,c_3\n");
    for i in 0..100 {
        text.push_str(&format!("{},0.5,0.0,0.0\n", i as f64 / 100.0));
    }
    fs::write(&policy, text).unwrap();
    let r = run(BENCHMARK, &["simulate", "--policy", "file", "--policy-file", policy.to_str().unwrap()]);
    assert_eq!(r.code(), Some(64));
    assert!(r.stderr().contains("columns"), "{}", r.stderr());
}

#[test]
fn compare_evaluates_a_feedback_file() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.csv");
    let mut text = String::from("time,c_1\n");
    for i in 0..100 {
        text.push_str(&format!("{},0.5\n", i as f64 / 100.0));
    }
    fs::write(&policy, text).unwrap();
    let r = run(BENCHMARK, &["compare", "--feedback", policy.to_str().unwrap()]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("report.csv");
    assert_eq!(t[3][0], "feedback");
    assert!(num(&t[3][3]) > num(&t[2][3]));
}

#[test]
fn verify_accepts_the_equilibrium() {
    let r = run(BENCHMARK, &["verify"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("spike.csv");
    assert_eq!(t.len(), 1 + 4 * 4 * 2);
    let pass = column(&t, "pass");
    assert!(t[1..].iter().all(|row| row[pass] == "true"));
}

#[test]
fn verify_rejects_the_zero_policy_at_time_zero() {
    let r = run(BENCHMARK, &["verify", "--policy", "zero", "--t", "0", "--w", "c+e1"]);
    assert_eq!(r.code(), Some(1));
    let t = r.table("spike.csv");
    let (time, est, se, pass) = (column(&t, "t"), column(&t, "dJ_over_eps"), column(&t, "se"), column(&t, "pass"));
    let failing: Vec<_> = t[1..].iter().filter(|row| row[pass] == "false").collect();
    assert!(!failing.is_empty());
    for row in failing {
        assert_eq!(num(&row[time]), 0.0);
        assert!(num(&row[est]) < -3.0 * num(&row[se]));
    }
}

#[test]
fn verify_rejects_eps_below_grid_step() {
    let r = run(BENCHMARK, &["verify", "--eps", "0.001"]);
    assert_eq!(r.code(), Some(64), "{}", r.stderr());
}

#[test]
fn verify_rejects_w_outside_the_cone() {
    let r = run(BENCHMARK, &["verify", "--t", "0", "--w", "-1"]);
    assert_eq!(r.code(), Some(64));
    assert!(r.stderr().contains("cone"), "{}", r.stderr());
}

#[test]
fn bsde_matches_the_deterministic_limit() {
    let r = run(FACTOR, &["bsde"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("bsde_consistency.csv");
    let e = column(&t, "rel_error");
    assert_eq!(t.len(), 52);
    assert!(t[1..].iter().all(|row| num(&row[e]) <= 0.01));
    assert_eq!(r.table("bsde.csv").len(), 52);
}

#[test]
fn bsde_with_zero_mu1_keeps_m_at_one() {
    let r = run(&FACTOR.replace("mu1 = 1.0", "mu1 = 0.0").replace("nu = 0.0", "nu = 0.2").replace("[[0.0, 0.05]]", "[[0.0, 0.0]]"), &["bsde"]);
    assert_eq!(r.code(), Some(0), "{}", r.stderr());
    let t = r.table("bsde.csv");
    let m = column(&t, "M_at_mean_y");
    assert!(t[1..].iter().all(|row| (num(&row[m]) - 1.0).abs() < 1e-9));
}

#[test]
fn bsde_is_reproducible() {
    let cfg = FACTOR.replace("nu = 0.0", "nu = 0.2");
    let a = run(&cfg, &["bsde"]);
    let b = run(&cfg, &["--threads", "2", "bsde"]);
    assert_eq!(fs::read(a.out.join("bsde.csv")).unwrap(), fs::read(b.out.join("bsde.csv")).unwrap());
}

#[test]
fn bsde_rejects_deterministic_theta() {
    let r = run(BENCHMARK, &["bsde"]);
    assert_eq!(r.code(), Some(64));
}
