use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn amtma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amtma"))
        .args(args)
        .env_remove("AMTMA_WORKERS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Twelve trials on an exact line in `x`, with one anchor and three regimes.
fn linear_csv() -> String {
    let mut text = String::from("trial_id,y,v,z.intercept,z.x,a.a,regime\n");
    for i in 0..12 {
        let x = i as f64 / 12.0;
        let a = ((i * 7) % 5) as f64;
        let v = 0.01 + 0.001 * (i % 3) as f64;
        text.push_str(&format!("t{i},{},{v},1,{x},{a},g{}\n", 0.2 - 0.3 * x, i % 3));
    }
    text
}

const POOLED_CSV: &str = "trial_id,events_t,n_t,events_c,n_c,z.intercept,regime
s1,12,150,20,148,1,old
s2,30,400,41,402,1,old
s3,8,90,9,95,1,modern
s4,55,1000,70,990,1,modern
s5,19,260,22,255,1,modern
";

#[test]
fn missing_file_is_a_json_error_with_exit_2() {
    let out = amtma(&["fit", "--data", "/nonexistent/trials.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let v = json(&out);
    assert_eq!(v["error"]["kind"], "Io");
    assert!(v["error"]["message"].as_str().unwrap().contains("/nonexistent/trials.csv"));
}

#[test]
fn invalid_hyperparameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", POOLED_CSV);
    let out = amtma(&["fit", "--data", s(&data), "--rho", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "InvalidHyperparameter");
}

#[test]
fn moderators_without_target_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &linear_csv());
    let out = amtma(&["fit", "--data", s(&data), "--scale", "rd"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "InvalidArgument");
}

#[test]
fn intercept_only_fit_matches_fixed_effect() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", POOLED_CSV);
    let forest = dir.path().join("forest.csv");
    let out = amtma(&["fit", "--data", s(&data), "--rho", "0", "--lambda-r", "0", "--forest", s(&forest)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let fe = &v["classical"][0];
    assert_eq!(fe["method"], "FE");
    let fe_theta = fe["theta_hat"].as_f64().unwrap();
    let amt_theta = v["amt"]["theta_target"].as_f64().unwrap();
    assert!((fe_theta - amt_theta).abs() < 1e-9, "{fe_theta} vs {amt_theta}");
    assert_eq!(v["data"]["k"], 5);
    assert_eq!(v["manifest"]["command"], "fit");

    let rows = fs::read_to_string(&forest).unwrap();
    assert!(rows.starts_with("kind,label,estimate,ci_lo,ci_hi,weight,regime\n"));
    assert_eq!(rows.lines().filter(|l| l.starts_with("trial,")).count(), 5);
    assert!(rows.lines().any(|l| l.starts_with("summary,AMT,")));
}

#[test]
fn bootstrap_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", POOLED_CSV);
    let run = || {
        let out = amtma(&["bootstrap", "--data", s(&data), "-B", "200", "--seed", "7"]);
        assert!(out.status.success());
        json(&out)["interval"].clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a["lo"].as_f64().unwrap() < a["hi"].as_f64().unwrap());
    assert_eq!(a["b_effective"], 200);
}

/// Five trials with a year moderator and two anchors, as in a small
/// primary-prevention pool.
const SMALL_ANCHORED_CSV: &str = "trial_id,y,v,z.intercept,z.year,a.era,a.big,regime
p1,-0.05,0.004,1,2018,1,1,new_big
p2,-0.12,0.006,1,2018,1,1,new_big
p3,0.04,0.009,1,2018,1,0,new_small
p4,-0.08,0.012,1,2006,0,1,old_big
p5,-0.20,0.003,1,2011,0,1,old_big
";

#[test]
fn tune_refuses_small_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", SMALL_ANCHORED_CSV);
    let out = amtma(&["tune", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    let v = json(&out);
    assert_eq!(v["error"]["kind"], "TooFewTrials");
    assert!(v["error"]["message"].as_str().unwrap().contains("keep the default rho and lambda_gamma"));
}

#[test]
fn noiseless_tune_prefers_smallest_rho_and_largest_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &linear_csv());
    let out = amtma(&["tune", "--data", s(&data), "--scale", "rd", "--lambda-r", "0", "--one-se"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let sel = &json(&out)["selection"];
    assert_eq!(sel["rho_star"].as_f64(), Some(0.0));
    assert_eq!(sel["lambda_gamma_star"].as_f64(), Some(3.0));
    assert_eq!(sel["score_table"].as_array().unwrap().len(), 16);
}

#[test]
fn diagnose_reports_sign_stability() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &linear_csv());
    let target = write(dir.path(), "t.json", r#"{"z_bar": [1, 0.5]}"#);
    let out = amtma(&["diagnose", "--data", s(&data), "--scale", "rd", "--target", s(&target)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert!((v["theta_target"].as_f64().unwrap() - 0.05).abs() < 1e-3);
    assert_eq!(v["diagnostics"]["abstain"], false);
}

fn simulate(dir: &Path, workers: &str) -> (Vec<u8>, Value) {
    let out = amtma(&[
        "--workers", workers, "simulate", "--scenario", "stable,sign_flip", "--reps", "20", "--seed", "11",
        "--coverage", "--coverage-reps", "4", "--coverage-boot", "5", "--raw", "--out", s(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    (fs::read(dir.join("metrics.csv")).unwrap(), manifest)
}

#[test]
fn simulate_is_identical_across_worker_counts() {
    let d1 = tempfile::tempdir().unwrap();
    let d3 = tempfile::tempdir().unwrap();
    let (m1, manifest) = simulate(d1.path(), "1");
    let (m3, _) = simulate(d3.path(), "3");
    assert_eq!(m1, m3);
    assert_eq!(fs::read(d1.path().join("raw.csv")).unwrap(), fs::read(d3.path().join("raw.csv")).unwrap());
    assert_eq!(fs::read(d1.path().join("coverage.csv")).unwrap(), fs::read(d3.path().join("coverage.csv")).unwrap());

    let text = String::from_utf8(m1).unwrap();
    assert!(text.starts_with("scenario,method,bias,rmse,mae,type_s,coverage,regret_smart,ss_trial_mean,abstain_rate\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 8);
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["constants_checksum"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = amtma(&["simulate", "--scenario", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["kind"], "InvalidArgument");
}
