//! CLI smoke tests: commands, file I/O, and exit codes
//! (0 pass, 1 verify fail, 2 legality, 3 deadlock, 4 usage).

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_systolic"))
}

fn write_temp(name: &str, text: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("systolic-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn examples_run_verifies_green() {
    let out = bin().args(["examples", "run", "fig4"]).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
}

#[test]
fn verify_with_bind_and_inputs() {
    let spec = write_temp(
        "pipe.sp",
        r#"
param B float 1
param I
var i
func A
func B_provider
func A_consumer
A(i) = negate(B(i))
bounds A i 0 I
A.isolate_producer_chain(B, B_provider).isolate_consumer_chain(A, A_consumer)
"#,
    );
    let inputs = write_temp(
        "pipe_inputs.json",
        r#"{"B": {"dtype": "float", "shape": [4], "data": [1.5, -2.0, 3.0, 0.25]}}"#,
    );
    let out = bin()
        .args([
            "verify",
            spec.to_str().unwrap(),
            "--bind",
            "I=4",
            "--inputs",
            inputs.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sim_prints_outputs_and_writes_trace() {
    let spec = write_temp(
        "sim.sp",
        r#"
param B float 1
param I
var i
func A
A(i) = B(i) + 1
bounds A i 0 I
"#,
    );
    let inputs = write_temp(
        "sim_inputs.json",
        r#"{"B": {"dtype": "float", "shape": [2], "data": [1.0, 2.0]}}"#,
    );
    let trace = std::env::temp_dir().join("systolic-cli-tests/trace.json");
    let out = bin()
        .args([
            "sim",
            spec.to_str().unwrap(),
            "--bind",
            "I=2",
            "--inputs",
            inputs.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("A:"), "{stdout}");
    let tr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(tr.get("channels").is_some());
}

#[test]
fn check_reports_legality_errors_with_exit_2() {
    let spec = write_temp(
        "bad.sp",
        r#"
param B float 1
param I
var i j
func A
A(i) = B(i)
bounds A i 0 I
A.reorder(i, j)
"#,
    );
    let out = bin()
        .args(["check", spec.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("diagnostic"), "{stdout}");
}

#[test]
fn graph_exports_dot_and_json() {
    let out = bin()
        .args(["examples", "run", "mergesort", "--dot"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let dot = String::from_utf8_lossy(&out.stdout);
    assert!(dot.contains("digraph"));
    assert!(dot.contains("out<2,0>"));
}

#[test]
fn usage_error_is_exit_4() {
    let out = bin()
        .args(["verify", "/no/such/file.sp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn lower_dumps_ir() {
    let spec = write_temp(
        "lower_ok.sp",
        r#"
param B float 2
param I
param J
assume symbolic_constant(II, JJ)
var i j ii jj
func A
A(i, j) = B(i, j)
bounds A i 0 I
bounds A j 0 J
A.tile(i, j, ii, jj, II, JJ)
"#,
    );
    let out = bin()
        .args(["lower", spec.to_str().unwrap(), "--dump-ir"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("for i = 0 .. I step II"), "{stdout}");
    assert!(stdout.contains("i', j' = i + ii, j + jj"), "{stdout}");
}
