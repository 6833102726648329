//! Lowering of a function's ordered definitions into a guarded loop nest,
//! and the indented text dump used by golden tests.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::IrError;
use crate::ir::expr::{BinOp, Expr};
use crate::ir::Program;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loop {
    pub var: String,
    pub lo: Expr,
    pub hi: Expr,
    pub step: Expr,
    pub unrolled: bool,
    pub vectorized: bool,
}

impl Loop {
    pub fn unit(var: &str, lo: Expr, hi: Expr) -> Loop {
        Loop {
            var: var.to_string(),
            lo,
            hi,
            step: Expr::int(1),
            unrolled: false,
            vectorized: false,
        }
    }
}

/// A lowered definition statement inside the nest body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub guard: Option<Expr>,
    pub lhs_indices: Vec<Expr>,
    pub rhs: Expr,
    pub is_update: bool,
}

/// Body statements. Isolated producer/consumer pieces forward values instead
/// of computing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BodyStmt {
    Def(Statement),
    /// Producer-chain piece: load/receive `value[access]` and send it onward.
    ForwardRead {
        value: String,
        access: Vec<Expr>,
        guard: Option<Expr>,
        /// Which read slot of the final consumer this forwards (for routing).
        consumer_slot: usize,
    },
    /// Consumer-chain piece: receive `value[access]` from the producer side
    /// and pass it toward memory.
    ForwardWrite {
        value: String,
        access: Vec<Expr>,
        guard: Option<Expr>,
        /// Index of the producing statement in the origin func's body.
        producer_stmt: usize,
    },
}

impl BodyStmt {
    pub fn guard(&self) -> Option<&Expr> {
        match self {
            BodyStmt::Def(s) => s.guard.as_ref(),
            BodyStmt::ForwardRead { guard, .. } | BodyStmt::ForwardWrite { guard, .. } => {
                guard.as_ref()
            }
        }
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        match self {
            BodyStmt::Def(s) => {
                if let Some(g) = &s.guard {
                    g.free_vars(&mut out);
                }
                for e in &s.lhs_indices {
                    e.free_vars(&mut out);
                }
                s.rhs.free_vars(&mut out);
            }
            BodyStmt::ForwardRead { access, guard, .. }
            | BodyStmt::ForwardWrite { access, guard, .. } => {
                if let Some(g) = guard {
                    g.free_vars(&mut out);
                }
                for e in access {
                    e.free_vars(&mut out);
                }
            }
        }
        out
    }
}

/// Per-function transformable IR: ordered loops, let bindings introduced by
/// tiling, and guarded body statements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopNest {
    pub func: String,
    pub loops: Vec<Loop>,
    /// `name' = base + tile + ...` bindings, in introduction order.
    pub lets: Vec<(String, Expr)>,
    pub body: Vec<BodyStmt>,
}

impl LoopNest {
    pub fn loop_index(&self, var: &str) -> Option<usize> {
        self.loops.iter().position(|l| l.var == var)
    }

    pub fn unrolled_vars(&self) -> Vec<String> {
        self.loops
            .iter()
            .filter(|l| l.unrolled)
            .map(|l| l.var.clone())
            .collect()
    }

    /// Variables used by the body, guards, or transitively by live lets.
    pub fn used_vars(&self) -> BTreeSet<String> {
        let mut used = BTreeSet::new();
        for s in &self.body {
            used.extend(s.free_vars());
        }
        // Lets are live if their name is used; expand transitively.
        loop {
            let mut grew = false;
            for (name, e) in &self.lets {
                if used.contains(name) {
                    for v in e.free_var_set() {
                        grew |= used.insert(v);
                    }
                }
            }
            if !grew {
                break;
            }
        }
        used
    }

    /// Drop let bindings whose name never occurs in the body.
    pub fn prune_dead_lets(&mut self) {
        let mut used = BTreeSet::new();
        for s in &self.body {
            used.extend(s.free_vars());
        }
        loop {
            let before = self.lets.len();
            let keep: Vec<(String, Expr)> = self
                .lets
                .iter()
                .filter(|(n, _)| used.contains(n))
                .cloned()
                .collect();
            for (_, e) in &keep {
                used.extend(e.free_var_set());
            }
            self.lets = keep;
            if self.lets.len() == before {
                break;
            }
        }
    }

    /// Indented text dump in the paper-figure style.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (depth, l) in self.loops.iter().enumerate() {
            out.push_str(&"  ".repeat(depth));
            out.push_str(&format!("for {} = {} .. {}", l.var, l.lo, l.hi));
            if l.step.as_int() != Some(1) {
                out.push_str(&format!(" step {}", l.step));
            }
            if l.unrolled {
                out.push_str("  [unrolled]");
            }
            if l.vectorized {
                out.push_str("  [vectorized]");
            }
            out.push('\n');
        }
        let indent = "  ".repeat(self.loops.len());
        if !self.lets.is_empty() {
            let names: Vec<&str> = self.lets.iter().map(|(n, _)| n.as_str()).collect();
            let exprs: Vec<String> = self.lets.iter().map(|(_, e)| e.to_string()).collect();
            out.push_str(&indent);
            out.push_str(&format!("{} = {}\n", names.join(", "), exprs.join(", ")));
        }
        for s in &self.body {
            out.push_str(&indent);
            if let Some(g) = s.guard() {
                out.push_str(&format!("if ({g}) "));
            }
            match s {
                BodyStmt::Def(st) => {
                    let idx = st
                        .lhs_indices
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(", ");
                    let op = if st.is_update { "+=" } else { "=" };
                    out.push_str(&format!("{}({}) {} {}\n", self.func, idx, op, st.rhs));
                }
                BodyStmt::ForwardRead { value, access, .. } => {
                    let idx = access
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(", ");
                    out.push_str(&format!("forward {value}({idx})\n"));
                }
                BodyStmt::ForwardWrite { value, access, .. } => {
                    let idx = access
                        .iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join(", ");
                    out.push_str(&format!("forward {value}({idx})\n"));
                }
            }
        }
        out
    }
}

/// Lower a function to its initial loop nest.
///
/// Loops follow the `set_bounds` order, first listed outermost. Every
/// definition becomes one innermost statement; loop variables a definition
/// does not mention are pinned to their lower bound by a guard, so boundary
/// initializations run exactly once.
pub fn lower_to_loop_nest(program: &Program, func: &str) -> Result<LoopNest, IrError> {
    let f = program
        .func(func)
        .ok_or_else(|| IrError::UnknownName(func.to_string()))?;
    if f.definitions.is_empty() {
        return Err(IrError::NoDefinitions(func.to_string()));
    }
    let declared: BTreeSet<String> = program.vars.iter().cloned().collect();
    let used = f.used_loop_vars(&declared);
    for v in &used {
        if f.bound_of(v).is_none() {
            return Err(IrError::MissingBounds {
                func: func.to_string(),
                var: v.clone(),
            });
        }
    }
    let loops: Vec<Loop> = f
        .bounds
        .iter()
        .map(|(v, lo, hi)| Loop::unit(v, lo.clone(), hi.clone()))
        .collect();

    let loop_vars: Vec<String> = loops.iter().map(|l| l.var.clone()).collect();
    let mut body = Vec::new();
    for d in &f.definitions {
        let mut def_vars = BTreeSet::new();
        for e in d.lhs_indices.iter().chain(std::iter::once(&d.rhs)) {
            e.free_vars(&mut def_vars);
        }
        if let Some(w) = &d.when {
            w.free_vars(&mut def_vars);
        }
        let mut guard: Option<Expr> = d.when.clone();
        for l in &loop_vars {
            if !def_vars.contains(l) {
                let pin = Expr::bin(BinOp::Eq, Expr::var(l), Expr::int(0));
                // Pin to the lower bound; bounds in this dialect start at
                // their `lo`, which the guard compares against directly.
                let pin = match f.bound_of(l) {
                    Some((lo, _)) if lo.as_int() != Some(0) => {
                        Expr::bin(BinOp::Eq, Expr::var(l), lo.clone())
                    }
                    _ => pin,
                };
                guard = Some(match guard {
                    None => pin,
                    Some(g) => Expr::and(g, pin),
                });
            }
        }
        body.push(BodyStmt::Def(Statement {
            guard,
            lhs_indices: d.lhs_indices.clone(),
            rhs: d.rhs.clone(),
            is_update: d.is_update,
        }));
    }
    Ok(LoopNest {
        func: func.to_string(),
        loops,
        lets: Vec::new(),
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Parameter, Placement};
    use crate::value::ElemType;

    fn sw_program() -> Program {
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("T", ElemType::Int, 1))
            .unwrap();
        p.add_parameter(Parameter::matrix("S", ElemType::Int, 1))
            .unwrap();
        p.add_parameter(Parameter::scalar("I")).unwrap();
        p.add_parameter(Parameter::scalar("J")).unwrap();
        p.add_var("i").unwrap();
        p.add_var("j").unwrap();
        p.add_func("A", Placement::Device).unwrap();
        p.add_definition("A", vec![Expr::int(-1), Expr::int(-1)], Expr::int(0), false)
            .unwrap();
        p.add_definition(
            "A",
            vec![Expr::var("i"), Expr::int(-1)],
            Expr::int(0),
            false,
        )
        .unwrap();
        p.add_definition(
            "A",
            vec![Expr::int(-1), Expr::var("j")],
            Expr::int(0),
            false,
        )
        .unwrap();
        p.add_definition(
            "A",
            vec![Expr::var("i"), Expr::var("j")],
            Expr::call(
                "f",
                vec![
                    Expr::func(
                        "A",
                        vec![Expr::sub(Expr::var("i"), Expr::int(1)), Expr::var("j")],
                    ),
                    Expr::func(
                        "A",
                        vec![Expr::var("i"), Expr::sub(Expr::var("j"), Expr::int(1))],
                    ),
                    Expr::func(
                        "A",
                        vec![
                            Expr::sub(Expr::var("i"), Expr::int(1)),
                            Expr::sub(Expr::var("j"), Expr::int(1)),
                        ],
                    ),
                    Expr::param("T", vec![Expr::sub(Expr::var("i"), Expr::int(1))]),
                    Expr::param("S", vec![Expr::sub(Expr::var("j"), Expr::int(1))]),
                ],
            ),
            false,
        )
        .unwrap();
        p.set_bounds("A", "i", Expr::int(0), Expr::var("I"))
            .unwrap();
        p.set_bounds("A", "j", Expr::int(0), Expr::var("J"))
            .unwrap();
        p
    }

    #[test]
    fn guarded_inits_match_definition_order() {
        let p = sw_program();
        let nest = lower_to_loop_nest(&p, "A").unwrap();
        assert_eq!(nest.loops.len(), 2);
        assert_eq!(nest.loops[0].var, "i");
        assert_eq!(nest.loops[1].var, "j");
        let guards: Vec<String> = nest
            .body
            .iter()
            .map(|s| s.guard().map(|g| g.to_string()).unwrap_or_default())
            .collect();
        assert_eq!(guards[0], "i == 0 && j == 0");
        assert_eq!(guards[1], "j == 0");
        assert_eq!(guards[2], "i == 0");
        assert_eq!(guards[3], "");
    }

    #[test]
    fn dump_shows_guards_and_bounds() {
        let p = sw_program();
        let nest = lower_to_loop_nest(&p, "A").unwrap();
        let d = nest.dump();
        assert!(d.starts_with("for i = 0 .. I\n  for j = 0 .. J\n"));
        assert!(d.contains("if (i == 0 && j == 0) A(-1, -1) = 0"));
        assert!(d.contains(
            "A(i, j) = f(A(i - 1, j), A(i, j - 1), A(i - 1, j - 1), T(i - 1), S(j - 1))"
        ));
    }

    #[test]
    fn missing_bounds_detected() {
        let mut p = sw_program();
        p.func_mut("A").unwrap().bounds.retain(|(v, _, _)| v != "j");
        let err = lower_to_loop_nest(&p, "A");
        assert!(matches!(err, Err(IrError::MissingBounds { .. })));
    }

    #[test]
    fn single_def_single_loop() {
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("B", ElemType::Float, 1))
            .unwrap();
        p.add_parameter(Parameter::scalar("I")).unwrap();
        p.add_var("i").unwrap();
        p.add_func("A", Placement::Device).unwrap();
        p.add_definition(
            "A",
            vec![Expr::var("i")],
            Expr::call("negate", vec![Expr::param("B", vec![Expr::var("i")])]),
            false,
        )
        .unwrap();
        p.set_bounds("A", "i", Expr::int(0), Expr::var("I"))
            .unwrap();
        let nest = lower_to_loop_nest(&p, "A").unwrap();
        assert_eq!(nest.loops.len(), 1);
        assert_eq!(nest.body.len(), 1);
        assert!(nest.body[0].guard().is_none());
    }
}
