//! Temporal definitions: parameters, assumptions, functions with ordered
//! definitions and bounds, plus the sequential reference interpreter.

pub mod expr;
pub mod interp;
pub mod lower;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use expr::{eval, eval_indices, BinOp, EvalContext, Expr, PureContext};
pub use interp::{check_assumptions, interpret, AssumptionReport, InterpOutputs};
pub use lower::{lower_to_loop_nest, BodyStmt, Loop, LoopNest, Statement};

use crate::error::IrError;
use crate::value::ElemType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Scalar,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub elem_type: ElemType,
    pub rank: usize,
}

impl Parameter {
    pub fn scalar(name: &str) -> Parameter {
        Parameter {
            name: name.to_string(),
            kind: ParamKind::Scalar,
            elem_type: ElemType::Int,
            rank: 0,
        }
    }

    pub fn matrix(name: &str, elem_type: ElemType, rank: usize) -> Parameter {
        assert!(rank > 0, "matrix parameter needs rank >= 1");
        Parameter {
            name: name.to_string(),
            kind: ParamKind::Matrix,
            elem_type,
            rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Assumption {
    NoAlias(Vec<String>),
    SymbolicConstant(Vec<String>),
    Divisible { dividend: String, divisor: String },
    BoolExpr(Expr),
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Assumption::NoAlias(ns) => write!(f, "no_alias({})", ns.join(", ")),
            Assumption::SymbolicConstant(ns) => write!(f, "symbolic_constant({})", ns.join(", ")),
            Assumption::Divisible { dividend, divisor } => {
                write!(f, "divisible({dividend}, {divisor})")
            }
            Assumption::BoolExpr(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Host,
    Device,
}

/// One ordered definition of a function: `lhs_indices = rhs` or `+= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Definition {
    pub lhs_indices: Vec<Expr>,
    pub rhs: Expr,
    pub is_update: bool,
    /// Optional user guard (`when` clause) on top of the derived boundary guard.
    pub when: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuncDef {
    pub name: String,
    pub placement: Placement,
    pub definitions: Vec<Definition>,
    /// Ordered outer-to-inner: the order `set_bounds` calls were made.
    pub bounds: Vec<(String, Expr, Expr)>,
    pub store_region: Option<Vec<Expr>>,
}

impl FuncDef {
    pub fn rank(&self) -> Option<usize> {
        self.definitions.first().map(|d| d.lhs_indices.len())
    }

    pub fn bound_of(&self, var: &str) -> Option<(&Expr, &Expr)> {
        self.bounds
            .iter()
            .find(|(v, _, _)| v == var)
            .map(|(_, lo, hi)| (lo, hi))
    }

    /// Loop variables used anywhere in the definitions.
    pub fn used_loop_vars(&self, declared_vars: &BTreeSet<String>) -> BTreeSet<String> {
        let mut used = BTreeSet::new();
        for d in &self.definitions {
            for e in d.lhs_indices.iter().chain(std::iter::once(&d.rhs)) {
                for v in e.free_var_set() {
                    if declared_vars.contains(&v) {
                        used.insert(v.clone());
                    }
                }
            }
            if let Some(w) = &d.when {
                for v in w.free_var_set() {
                    if declared_vars.contains(&v) {
                        used.insert(v.clone());
                    }
                }
            }
        }
        used
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub parameters: Vec<Parameter>,
    pub assumptions: Vec<Assumption>,
    pub vars: Vec<String>,
    pub funcs: Vec<FuncDef>,
    /// Imperative implementations registered for functions via define_extern.
    pub extern_sigs: BTreeMap<String, crate::externs::ExternSig>,
}

impl Program {
    pub fn new() -> Program {
        Program::default()
    }

    pub fn add_parameter(&mut self, p: Parameter) -> Result<(), IrError> {
        if self.name_declared(&p.name) {
            return Err(IrError::DuplicateName(p.name));
        }
        self.parameters.push(p);
        Ok(())
    }

    pub fn add_var(&mut self, name: &str) -> Result<(), IrError> {
        if self.name_declared(name) {
            return Err(IrError::DuplicateName(name.to_string()));
        }
        self.vars.push(name.to_string());
        Ok(())
    }

    pub fn add_func(&mut self, name: &str, placement: Placement) -> Result<(), IrError> {
        if self.name_declared(name) {
            return Err(IrError::DuplicateName(name.to_string()));
        }
        self.funcs.push(FuncDef {
            name: name.to_string(),
            placement,
            definitions: Vec::new(),
            bounds: Vec::new(),
            store_region: None,
        });
        Ok(())
    }

    pub fn add_assumption(&mut self, a: Assumption) -> Result<(), IrError> {
        // Symbolic constants are names introduced by the assumption itself.
        if let Assumption::SymbolicConstant(names) = &a {
            for n in names {
                if self.name_declared(n) {
                    return Err(IrError::DuplicateName(n.clone()));
                }
            }
        }
        self.assumptions.push(a);
        Ok(())
    }

    pub fn name_declared(&self, name: &str) -> bool {
        self.parameters.iter().any(|p| p.name == name)
            || self.vars.iter().any(|v| v == name)
            || self.funcs.iter().any(|f| f.name == name)
            || self.symbolic_constants().contains(name)
    }

    pub fn symbolic_constants(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for a in &self.assumptions {
            if let Assumption::SymbolicConstant(names) = a {
                out.extend(names.iter().cloned());
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn func(&self, name: &str) -> Option<&FuncDef> {
        self.funcs.iter().find(|f| f.name == name)
    }

    pub fn func_mut(&mut self, name: &str) -> Option<&mut FuncDef> {
        self.funcs.iter_mut().find(|f| f.name == name)
    }

    /// Append a definition to `func`, preserving order into the lowered body.
    pub fn add_definition(
        &mut self,
        func: &str,
        lhs_indices: Vec<Expr>,
        rhs: Expr,
        is_update: bool,
    ) -> Result<(), IrError> {
        self.add_definition_when(func, lhs_indices, rhs, is_update, None)
    }

    pub fn add_definition_when(
        &mut self,
        func: &str,
        lhs_indices: Vec<Expr>,
        rhs: Expr,
        is_update: bool,
        when: Option<Expr>,
    ) -> Result<(), IrError> {
        self.check_expr_names(&rhs)?;
        for e in &lhs_indices {
            self.check_expr_names(e)?;
        }
        if let Some(w) = &when {
            self.check_expr_names(w)?;
        }
        let f = self
            .func(func)
            .ok_or_else(|| IrError::UnknownName(func.to_string()))?;
        if let Some(rank) = f.rank() {
            if rank != lhs_indices.len() {
                return Err(IrError::RankMismatch {
                    name: func.to_string(),
                    expected: rank,
                    got: lhs_indices.len(),
                });
            }
        }
        self.func_mut(func).unwrap().definitions.push(Definition {
            lhs_indices,
            rhs,
            is_update,
            when,
        });
        Ok(())
    }

    /// Record the half-open range `[lo, hi)` for a loop variable; step is 1.
    pub fn set_bounds(&mut self, func: &str, var: &str, lo: Expr, hi: Expr) -> Result<(), IrError> {
        if !self.vars.iter().any(|v| v == var) {
            return Err(IrError::UnknownVar(var.to_string()));
        }
        self.check_expr_names(&lo)?;
        self.check_expr_names(&hi)?;
        let f = self
            .func_mut(func)
            .ok_or_else(|| IrError::UnknownName(func.to_string()))?;
        if let Some(slot) = f.bounds.iter_mut().find(|(v, _, _)| v == var) {
            slot.1 = lo;
            slot.2 = hi;
        } else {
            f.bounds.push((var.to_string(), lo, hi));
        }
        Ok(())
    }

    /// Bind a function to an imperative implementation. Any invocation of the
    /// function is replaced by the implementation.
    pub fn set_extern(
        &mut self,
        func: &str,
        sig: crate::externs::ExternSig,
    ) -> Result<(), IrError> {
        if self.func(func).is_none() {
            return Err(IrError::UnknownName(func.to_string()));
        }
        if self.extern_sigs.contains_key(func) {
            return Err(IrError::DuplicateName(func.to_string()));
        }
        self.extern_sigs.insert(func.to_string(), sig);
        Ok(())
    }

    pub fn extern_sig(&self, func: &str) -> Option<&crate::externs::ExternSig> {
        self.extern_sigs.get(func)
    }

    pub fn set_store_region(&mut self, func: &str, region: Vec<Expr>) -> Result<(), IrError> {
        for e in &region {
            self.check_expr_names(e)?;
        }
        let f = self
            .func_mut(func)
            .ok_or_else(|| IrError::UnknownName(func.to_string()))?;
        f.store_region = Some(region);
        Ok(())
    }

    fn check_expr_names(&self, e: &Expr) -> Result<(), IrError> {
        let syms = self.symbolic_constants();
        let mut params = BTreeSet::new();
        let mut funcs = BTreeSet::new();
        e.referenced_tensors(&mut params, &mut funcs);
        for p in &params {
            let pd = self
                .param(p)
                .ok_or_else(|| IrError::UnknownName(p.clone()))?;
            // Rank checked against each reference site below.
            let _ = pd;
        }
        for fname in &funcs {
            if self.func(fname).is_none() {
                return Err(IrError::UnknownName(fname.clone()));
            }
        }
        // Rank checks per reference.
        self.check_ranks(e)?;
        for v in e.free_var_set() {
            let known = self.vars.contains(&v)
                || syms.contains(&v)
                || self.param(&v).map(|p| p.rank == 0).unwrap_or(false)
                || v.ends_with('\'');
            if !known {
                return Err(IrError::UnknownName(v));
            }
        }
        Ok(())
    }

    fn check_ranks(&self, e: &Expr) -> Result<(), IrError> {
        match e {
            Expr::ParamRef(n, idx) => {
                let p = self
                    .param(n)
                    .ok_or_else(|| IrError::UnknownName(n.clone()))?;
                // Stream arguments may supply fewer indices than the rank;
                // more than the rank is always an error.
                if idx.len() > p.rank {
                    return Err(IrError::RankMismatch {
                        name: n.clone(),
                        expected: p.rank,
                        got: idx.len(),
                    });
                }
                for i in idx {
                    self.check_ranks(i)?;
                }
                Ok(())
            }
            Expr::FuncRef(n, idx) => {
                let f = self
                    .func(n)
                    .ok_or_else(|| IrError::UnknownName(n.clone()))?;
                if let Some(rank) = f.rank() {
                    if idx.len() > rank {
                        return Err(IrError::RankMismatch {
                            name: n.clone(),
                            expected: rank,
                            got: idx.len(),
                        });
                    }
                }
                for i in idx {
                    self.check_ranks(i)?;
                }
                Ok(())
            }
            Expr::Call(_, args) => {
                for a in args {
                    self.check_ranks(a)?;
                }
                Ok(())
            }
            Expr::Binary(_, a, b) => {
                self.check_ranks(a)?;
                self.check_ranks(b)
            }
            Expr::Select(c, a, b) => {
                self.check_ranks(c)?;
                self.check_ranks(a)?;
                self.check_ranks(b)
            }
            _ => Ok(()),
        }
    }

    /// Funcs referenced by `func`'s right-hand sides (producers), excluding itself.
    pub fn producers_of(&self, func: &str) -> BTreeSet<String> {
        let mut params = BTreeSet::new();
        let mut funcs = BTreeSet::new();
        if let Some(f) = self.func(func) {
            for d in &f.definitions {
                d.rhs.referenced_tensors(&mut params, &mut funcs);
                for e in &d.lhs_indices {
                    e.referenced_tensors(&mut params, &mut funcs);
                }
            }
        }
        funcs.remove(func);
        funcs
    }

    /// Funcs in topological producer-to-consumer order. Self-recurrences are
    /// allowed; cycles across distinct funcs are an error.
    pub fn topo_order(&self) -> Result<Vec<String>, IrError> {
        let names: Vec<String> = self.funcs.iter().map(|f| f.name.clone()).collect();
        let mut deps: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for n in &names {
            deps.insert(n.clone(), self.producers_of(n));
        }
        let mut order = Vec::new();
        let mut placed: BTreeSet<String> = BTreeSet::new();
        while order.len() < names.len() {
            let mut advanced = false;
            for n in &names {
                if placed.contains(n) {
                    continue;
                }
                if deps[n]
                    .iter()
                    .all(|d| placed.contains(d) || self.func(d).is_none())
                {
                    order.push(n.clone());
                    placed.insert(n.clone());
                    advanced = true;
                }
            }
            if !advanced {
                return Err(IrError::Binding(
                    "producer/consumer graph has a cycle across functions".to_string(),
                ));
            }
        }
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgemm_program() -> Program {
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("A", ElemType::Int, 2))
            .unwrap();
        p.add_parameter(Parameter::matrix("B", ElemType::Int, 2))
            .unwrap();
        p.add_parameter(Parameter::scalar("I")).unwrap();
        p.add_parameter(Parameter::scalar("J")).unwrap();
        p.add_parameter(Parameter::scalar("K")).unwrap();
        for v in ["i", "j", "k"] {
            p.add_var(v).unwrap();
        }
        p.add_func("C", Placement::Device).unwrap();
        p.add_definition(
            "C",
            vec![Expr::var("i"), Expr::var("j")],
            Expr::int(0),
            false,
        )
        .unwrap();
        p.add_definition(
            "C",
            vec![Expr::var("i"), Expr::var("j")],
            Expr::mul(
                Expr::param("A", vec![Expr::var("i"), Expr::var("k")]),
                Expr::param("B", vec![Expr::var("k"), Expr::var("j")]),
            ),
            true,
        )
        .unwrap();
        p.set_bounds("C", "i", Expr::int(0), Expr::var("I"))
            .unwrap();
        p.set_bounds("C", "j", Expr::int(0), Expr::var("J"))
            .unwrap();
        p.set_bounds("C", "k", Expr::int(0), Expr::var("K"))
            .unwrap();
        p
    }

    #[test]
    fn build_and_order_preserved() {
        let p = sgemm_program();
        let c = p.func("C").unwrap();
        assert_eq!(c.definitions.len(), 2);
        assert!(!c.definitions[0].is_update);
        assert!(c.definitions[1].is_update);
        assert_eq!(
            c.bounds
                .iter()
                .map(|(v, _, _)| v.as_str())
                .collect::<Vec<_>>(),
            vec!["i", "j", "k"]
        );
    }

    #[test]
    fn unknown_names_rejected() {
        let mut p = sgemm_program();
        let err = p.add_definition(
            "C",
            vec![Expr::var("i"), Expr::var("j")],
            Expr::var("qq"),
            true,
        );
        assert!(matches!(err, Err(IrError::UnknownName(n)) if n == "qq"));
        let err = p.set_bounds("C", "zz", Expr::int(0), Expr::int(4));
        assert!(matches!(err, Err(IrError::UnknownVar(_))));
    }

    #[test]
    fn rank_mismatch_rejected() {
        let mut p = sgemm_program();
        let err = p.add_definition(
            "C",
            vec![Expr::var("i"), Expr::var("j")],
            Expr::param("A", vec![Expr::var("i"), Expr::var("j"), Expr::var("k")]),
            true,
        );
        assert!(matches!(err, Err(IrError::RankMismatch { .. })));
    }

    #[test]
    fn self_identity_update_accepted() {
        let mut p = Program::new();
        p.add_parameter(Parameter::scalar("I")).unwrap();
        p.add_var("i").unwrap();
        p.add_func("A", Placement::Device).unwrap();
        p.add_definition("A", vec![Expr::var("i")], Expr::int(1), false)
            .unwrap();
        p.add_definition(
            "A",
            vec![Expr::var("i")],
            Expr::func("A", vec![Expr::var("i")]),
            true,
        )
        .unwrap();
        assert_eq!(p.func("A").unwrap().definitions.len(), 2);
    }

    #[test]
    fn topo_order_follows_producers() {
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("x", ElemType::Int, 1))
            .unwrap();
        p.add_parameter(Parameter::scalar("N")).unwrap();
        p.add_var("i").unwrap();
        p.add_func("g", Placement::Device).unwrap();
        p.add_func("h", Placement::Device).unwrap();
        // h reads g, so g must come first even though h was declared later.
        p.add_definition(
            "h",
            vec![Expr::var("i")],
            Expr::func("g", vec![Expr::var("i")]),
            false,
        )
        .unwrap();
        p.add_definition(
            "g",
            vec![Expr::var("i")],
            Expr::param("x", vec![Expr::var("i")]),
            false,
        )
        .unwrap();
        let order = p.topo_order().unwrap();
        assert_eq!(order, vec!["g".to_string(), "h".to_string()]);
    }
}
