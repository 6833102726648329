//! Differential verification: the simulated spatial mapping must agree with
//! the sequential reference interpreter on the same inputs, exactly for
//! integers and to 1e-6 relative error for floats.

use serde::{Deserialize, Serialize};

use crate::error::LayoutError;
use crate::externs::Registry;
use crate::ir::{check_assumptions, interpret, Program};
use crate::layout::{infer_channel_depths, instantiate_pes, ScheduledProgram};
use crate::schedule::Schedule;
use crate::sim::{run, RunConfig, Trace};
use crate::value::{Binding, Scalar, Tensor};

pub const FLOAT_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuncReport {
    pub func: String,
    pub compared: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub funcs: Vec<FuncReport>,
    pub failure: Option<String>,
    pub steps: u64,
    pub pe_count: usize,
    pub channel_count: usize,
}

impl VerifyReport {
    fn failed(message: String) -> VerifyReport {
        VerifyReport {
            pass: false,
            funcs: Vec::new(),
            failure: Some(message),
            steps: 0,
            pe_count: 0,
            channel_count: 0,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(f) = &self.failure {
            out.push_str(&format!("FAIL: {f}\n"));
            return out;
        }
        for fr in &self.funcs {
            out.push_str(&format!(
                "{} {}: {} elements, max abs {:.3e}, max rel {:.3e}{}\n",
                if fr.pass { "ok  " } else { "FAIL" },
                fr.func,
                fr.compared,
                fr.max_abs_err,
                fr.max_rel_err,
                if fr.note.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", fr.note)
                }
            ));
        }
        out.push_str(&format!(
            "{}: {} PEs, {} channels, {} scheduler steps\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.pe_count,
            self.channel_count,
            self.steps
        ));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Compare two tensors over the intersection of their domains; the reference
/// decides which elements must exist.
pub fn compare_tensors(name: &str, want: &Tensor, got: &Tensor) -> FuncReport {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut compared = 0usize;
    let mut note = String::new();
    let mut pass = true;
    let mut idx = vec![0i64; want.rank()];
    fn walk(
        want: &Tensor,
        got: &Tensor,
        d: usize,
        idx: &mut Vec<i64>,
        max_abs: &mut f64,
        max_rel: &mut f64,
        compared: &mut usize,
        pass: &mut bool,
        note: &mut String,
    ) {
        if d == want.rank() {
            let w = want.get(idx).unwrap();
            match got.get(idx) {
                None => {
                    *pass = false;
                    if note.is_empty() {
                        *note = format!("missing element at {idx:?}");
                    }
                }
                Some(g) => {
                    *compared += 1;
                    let exact = matches!((w, g), (Scalar::Int(_), Scalar::Int(_)));
                    let abs = (w.as_f64() - g.as_f64()).abs();
                    let rel = if w.as_f64() == 0.0 {
                        abs
                    } else {
                        abs / w.as_f64().abs()
                    };
                    *max_abs = max_abs.max(abs);
                    *max_rel = max_rel.max(rel);
                    let ok = if exact { abs == 0.0 } else { rel <= FLOAT_RTOL };
                    if !ok && *pass {
                        *pass = false;
                        *note = format!("first mismatch at {idx:?}: {w} vs {g}");
                    }
                }
            }
            return;
        }
        for i in 0..want.shape[d] {
            idx[d] = want.origin[d] + i as i64;
            walk(
                want,
                got,
                d + 1,
                idx,
                max_abs,
                max_rel,
                compared,
                pass,
                note,
            );
        }
    }
    walk(
        want,
        got,
        0,
        &mut idx,
        &mut max_abs,
        &mut max_rel,
        &mut compared,
        &mut pass,
        &mut note,
    );
    FuncReport {
        func: name.to_string(),
        compared,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass,
        note,
    }
}

/// Functions whose values leave the graph: not consumed by any other
/// function (self-recurrence does not count as consumption).
pub fn terminal_funcs(program: &Program) -> Vec<String> {
    let mut out = Vec::new();
    for f in &program.funcs {
        if f.definitions.is_empty() {
            continue;
        }
        let consumed = program
            .funcs
            .iter()
            .any(|g| g.name != f.name && program.producers_of(&g.name).contains(&f.name));
        if !consumed {
            out.push(f.name.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthPolicy {
    /// Probe with unbounded channels, then pin observed occupancies.
    Inferred,
    /// Force every register channel to its declared minimum depth.
    ForcedMin,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    pub depths: DepthPolicy,
    pub max_steps: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            depths: DepthPolicy::Inferred,
            max_steps: 100_000_000,
        }
    }
}

/// Run the interpreter and the simulated graph on identical inputs and
/// compare outputs restricted to store regions. Deadlocks, wiring errors and
/// step-limit overruns are failures with diagnostics, never silent passes.
pub fn differential_check(
    program: &Program,
    schedule: &Schedule,
    binding: &Binding,
    registry: &Registry,
    options: &CheckOptions,
) -> VerifyReport {
    let guard = check_assumptions(program, binding);
    if !guard.all_pass() {
        let bad: Vec<String> = guard
            .entries
            .iter()
            .filter(|(_, ok, _)| !ok)
            .map(|(n, _, d)| format!("{n}: {d}"))
            .collect();
        return VerifyReport::failed(format!("assumption check failed: {}", bad.join("; ")));
    }
    let reference = match interpret(program, binding, registry) {
        Ok(r) => r,
        Err(e) => return VerifyReport::failed(format!("interpreter: {e}")),
    };
    let sp = match ScheduledProgram::build(program, schedule) {
        Ok(sp) => sp,
        Err(e) => return VerifyReport::failed(format!("schedule: {e}")),
    };
    let graph = match instantiate_pes(&sp, binding, registry) {
        Ok(g) => g,
        Err(e) => return VerifyReport::failed(format!("instantiate: {e}")),
    };
    let graph = match options.depths {
        DepthPolicy::Inferred => match infer_channel_depths(&graph, registry) {
            Ok(g) => g,
            Err(e) => return VerifyReport::failed(format!("depth inference: {e}")),
        },
        DepthPolicy::ForcedMin => {
            let mut g = graph.clone();
            for c in g.channels.iter_mut() {
                if c.kind == crate::layout::ChannelKind::Register {
                    c.depth = Some(c.min_depth.max(1));
                }
            }
            g
        }
    };
    let cfg = RunConfig {
        max_steps: options.max_steps,
        seed: options.seed,
        record_trace: false,
    };
    let (outputs, trace) = match run(&graph, registry, &cfg) {
        Ok(r) => r,
        Err(e) => return VerifyReport::failed(format!("simulation: {e}")),
    };
    let mut funcs = Vec::new();
    let mut pass = true;
    for name in terminal_funcs(program) {
        let Some(want) = reference.outputs.get(&name) else {
            continue;
        };
        match outputs.outputs.get(&name) {
            None => {
                pass = false;
                funcs.push(FuncReport {
                    func: name.clone(),
                    compared: 0,
                    max_abs_err: f64::INFINITY,
                    max_rel_err: f64::INFINITY,
                    pass: false,
                    note: "no simulated output".to_string(),
                });
            }
            Some(got) => {
                let r = compare_tensors(&name, want, got);
                pass &= r.pass;
                funcs.push(r);
            }
        }
    }
    VerifyReport {
        pass,
        funcs,
        failure: None,
        steps: trace.steps,
        pe_count: graph.pes.len(),
        channel_count: graph.channels.len(),
    }
}

/// Build, infer depths and run in one call; used by tests and the CLI.
pub fn build_and_run(
    program: &Program,
    schedule: &Schedule,
    binding: &Binding,
    registry: &Registry,
    options: &CheckOptions,
) -> Result<(crate::sim::RunOutputs, Trace, crate::layout::SpatialGraph), LayoutError> {
    let sp = ScheduledProgram::build(program, schedule)?;
    let graph = instantiate_pes(&sp, binding, registry)?;
    let graph = match options.depths {
        DepthPolicy::Inferred => infer_channel_depths(&graph, registry)?,
        DepthPolicy::ForcedMin => {
            let mut g = graph.clone();
            for c in g.channels.iter_mut() {
                if c.kind == crate::layout::ChannelKind::Register {
                    c.depth = Some(c.min_depth.max(1));
                }
            }
            g
        }
    };
    let cfg = RunConfig {
        max_steps: options.max_steps,
        seed: options.seed,
        record_trace: false,
    };
    let (outputs, trace) = run(&graph, registry, &cfg)
        .map_err(|e| LayoutError::InconsistentWiring(format!("run failed: {e}")))?;
    Ok((outputs, trace, graph))
}

/// One executable guard per assumption, evaluated against a binding before a
/// run; failing guards report the assumption's source text.
pub struct RuntimeGuard {
    pub text: String,
    pub check: Box<dyn Fn(&Binding) -> bool + Send + Sync>,
}

pub fn emit_runtime_guards(program: &Program) -> Vec<RuntimeGuard> {
    let mut out = Vec::new();
    for a in program.assumptions.clone() {
        let text = a.to_string();
        let prog = program.clone();
        let a2 = a.clone();
        out.push(RuntimeGuard {
            text,
            check: Box::new(move |b: &Binding| {
                let mut p = Program::new();
                p.parameters = prog.parameters.clone();
                p.assumptions = vec![a2.clone()];
                check_assumptions(&p, b).all_pass()
            }),
        });
    }
    out
}

/// A named schedule mutation for the sensitivity suite.
#[derive(Debug, Clone)]
pub struct Mutation {
    pub name: String,
    pub expect: &'static str,
    pub schedule: Schedule,
    pub depths: DepthPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationOutcome {
    pub name: String,
    pub caught: bool,
    pub how: String,
}

/// Apply each mutated schedule; every one must fail verification, raise a
/// legality/wiring error, or deadlock. A silent pass is reported as such.
pub fn run_mutations(
    program: &Program,
    mutations: &[Mutation],
    binding: &Binding,
    registry: &Registry,
) -> Vec<MutationOutcome> {
    let mut out = Vec::new();
    for m in mutations {
        let diags = crate::schedule::static_legality_check(program, &m.schedule);
        if !diags.is_empty() {
            out.push(MutationOutcome {
                name: m.name.clone(),
                caught: true,
                how: format!("legality: {}", diags[0]),
            });
            continue;
        }
        let opts = CheckOptions {
            depths: m.depths,
            max_steps: 20_000_000,
            ..CheckOptions::default()
        };
        let report = differential_check(program, &m.schedule, binding, registry, &opts);
        if report.pass {
            out.push(MutationOutcome {
                name: m.name.clone(),
                caught: false,
                how: "silent pass".to_string(),
            });
        } else {
            out.push(MutationOutcome {
                name: m.name.clone(),
                caught: true,
                how: report
                    .failure
                    .unwrap_or_else(|| "value mismatch".to_string()),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guards_reject_bad_bindings() {
        let (p, _s) = crate::examples::load("smith-waterman").unwrap();
        let guards = emit_runtime_guards(&p);
        assert!(!guards.is_empty());
        let mut b = Binding::new();
        b.set_scalar("I", 8)
            .set_scalar("J", 17)
            .set_scalar("II", 4)
            .set_scalar("JJ", 4)
            .set_scalar("MAX_J", 16);
        let le = guards
            .iter()
            .find(|g| g.text.contains("MAX_J") && !g.text.contains("symbolic"))
            .unwrap();
        assert!(!(le.check)(&b));
        b.set_scalar("J", 4);
        assert!((le.check)(&b));
        // divisible(I, II) with I=8, II=4 passes; II=3 fails.
        let div = guards
            .iter()
            .find(|g| g.text.contains("divisible(I"))
            .unwrap();
        b.set_scalar("II", 4);
        assert!((div.check)(&b));
        b.set_scalar("II", 3);
        assert!(!(div.check)(&b));
    }

    #[test]
    fn no_assumptions_no_guards() {
        let (p, _s) = crate::examples::load("fig4").unwrap();
        assert!(emit_runtime_guards(&p).is_empty());
    }
}
