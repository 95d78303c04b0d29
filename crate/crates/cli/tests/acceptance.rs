//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line and asserts the criterion at its stated tolerance.

use std::process::Command;
use std::time::{Duration, Instant};

use kvevict::checks::{self, CheckResult};

const SEED: u64 = 0;

fn report(id: u32, passed: bool, detail: &str) {
    println!("criterion {id}: {} {detail}", if passed { "PASS" } else { "FAIL" });
}

fn assert_check(check: CheckResult, limit: Option<Duration>) {
    let in_time = limit.is_none_or(|l| check.elapsed <= l);
    let passed = check.passed && in_time;
    let detail = format!("{} ({:.2}s)", check.detail, check.elapsed.as_secs_f64());
    report(check.id, passed, &detail);
    assert!(check.passed, "criterion {}: {}", check.id, check.detail);
    assert!(
        in_time,
        "criterion {}: took {:?}, limit {:?}",
        check.id, check.elapsed, limit
    );
}

#[test]
fn criterion_01_decomposition_identity() {
    assert_check(checks::decomposition_identity(SEED), Some(Duration::from_secs(10)));
}

#[test]
fn criterion_02_contribution_completeness() {
    assert_check(checks::contribution_completeness(SEED), Some(Duration::from_secs(10)));
}

#[test]
fn criterion_03_normalization_ranking() {
    assert_check(checks::normalization_ranking(SEED), None);
}

#[test]
fn criterion_04_budget_exactness() {
    assert_check(checks::budget_exactness(SEED), None);
}

#[test]
fn criterion_05_fidelity_direction() {
    assert_check(checks::fidelity_direction(SEED), Some(Duration::from_secs(300)));
}

#[test]
fn criterion_06_crs_oracle() {
    assert_check(checks::crs_oracle(SEED), Some(Duration::from_secs(60)));
}

#[test]
fn criterion_07_needle_separation() {
    assert_check(checks::needle_separation(SEED), None);
}

#[test]
fn criterion_08_ablation_ordering() {
    assert_check(checks::ablation_ordering(SEED), None);
}

#[test]
fn criterion_09_baseline_conformance() {
    assert_check(checks::baseline_conformance(SEED), None);
}

#[test]
fn criterion_10_selftest_command() {
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = Command::new(env!("CARGO_BIN_EXE_kvevict"))
        .arg("selftest")
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&run.stdout);
    let checks = stdout
        .lines()
        .filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]"))
        .count();
    let code = run.status.code();
    let passed = code == Some(0) && elapsed < Duration::from_secs(120) && checks == 7;
    report(
        10,
        passed,
        &format!("exit {code:?}, {checks} checks, {:.2}s", elapsed.as_secs_f64()),
    );
    print!("{stdout}");
    assert_eq!(checks, 7, "selftest should run criteria 1-4, 6, 7, 9");
    assert!(elapsed < Duration::from_secs(120), "selftest took {elapsed:?}");
    assert_eq!(
        code,
        Some(0),
        "selftest exit status; stderr: {}",
        String::from_utf8_lossy(&run.stderr)
    );
}
