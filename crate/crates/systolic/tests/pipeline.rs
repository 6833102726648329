//! End-to-end checks: every bundled example builds, simulates, and agrees
//! with the reference interpreter.

use rand::SeedableRng;
use systolic::externs::Registry;
use systolic::verify::{differential_check, CheckOptions};

fn check_example(name: &str, seed: u64) {
    let (program, schedule) = systolic::examples::load(name).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let binding = systolic::examples::default_binding(name, &mut rng).unwrap();
    let registry = Registry::with_builtins();
    let report = differential_check(
        &program,
        &schedule,
        &binding,
        &registry,
        &CheckOptions::default(),
    );
    assert!(report.pass, "{name}:\n{}", report.render());
}

#[test]
fn fig4_pipeline_matches_interpreter() {
    check_example("fig4", 1);
}

#[test]
fn sgemm_matches_interpreter() {
    check_example("sgemm", 2);
}

#[test]
fn smith_waterman_matches_interpreter() {
    check_example("smith-waterman", 3);
}

#[test]
fn conv_relu_matches_interpreter() {
    check_example("conv-relu", 4);
}

#[test]
fn spmv_matches_interpreter() {
    check_example("spmv", 5);
}

#[test]
fn mergesort_matches_interpreter() {
    check_example("mergesort", 6);
}
