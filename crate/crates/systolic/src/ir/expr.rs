//! Expression trees for definitions, bounds and guards.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::value::{
    scalar_add, scalar_div, scalar_eq, scalar_le, scalar_lt, scalar_max, scalar_min, scalar_mod,
    scalar_mul, scalar_sub, Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Min,
    Max,
    Lt,
    Le,
    Eq,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Min => "min",
            BinOp::Max => "max",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Eq => "==",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    IntConst(i64),
    FloatConst(f64),
    /// A loop variable, let-bound name, or symbolic constant.
    Var(String),
    /// A parameter reference; empty indices for scalar parameters.
    ParamRef(String, Vec<Expr>),
    /// A reference to another (or the same) function's value.
    FuncRef(String, Vec<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Select(Box<Expr>, Box<Expr>, Box<Expr>),
    /// A call to a registered extern (pure or stateful).
    Call(String, Vec<Expr>),
}

impl Expr {
    pub fn int(v: i64) -> Expr {
        Expr::IntConst(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Mul, a, b)
    }

    pub fn eq(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Eq, a, b)
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::And, a, b)
    }

    pub fn param(name: &str, idx: Vec<Expr>) -> Expr {
        Expr::ParamRef(name.to_string(), idx)
    }

    pub fn func(name: &str, idx: Vec<Expr>) -> Expr {
        Expr::FuncRef(name.to_string(), idx)
    }

    pub fn call(name: &str, args: Vec<Expr>) -> Expr {
        Expr::Call(name.to_string(), args)
    }

    /// All `Var` names appearing in the expression.
    pub fn free_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::IntConst(_) | Expr::FloatConst(_) => {}
            Expr::Var(n) => {
                out.insert(n.clone());
            }
            Expr::ParamRef(_, idx) | Expr::FuncRef(_, idx) | Expr::Call(_, idx) => {
                for e in idx {
                    e.free_vars(out);
                }
            }
            Expr::Binary(_, a, b) => {
                a.free_vars(out);
                b.free_vars(out);
            }
            Expr::Select(c, a, b) => {
                c.free_vars(out);
                a.free_vars(out);
                b.free_vars(out);
            }
        }
    }

    pub fn free_var_set(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        self.free_vars(&mut s);
        s
    }

    pub fn uses_var(&self, name: &str) -> bool {
        self.free_var_set().contains(name)
    }

    /// Names of parameters/functions referenced (including extern call names).
    pub fn referenced_tensors(&self, params: &mut BTreeSet<String>, funcs: &mut BTreeSet<String>) {
        match self {
            Expr::IntConst(_) | Expr::FloatConst(_) | Expr::Var(_) => {}
            Expr::ParamRef(n, idx) => {
                params.insert(n.clone());
                for e in idx {
                    e.referenced_tensors(params, funcs);
                }
            }
            Expr::FuncRef(n, idx) => {
                funcs.insert(n.clone());
                for e in idx {
                    e.referenced_tensors(params, funcs);
                }
            }
            Expr::Call(_, args) => {
                for e in args {
                    e.referenced_tensors(params, funcs);
                }
            }
            Expr::Binary(_, a, b) => {
                a.referenced_tensors(params, funcs);
                b.referenced_tensors(params, funcs);
            }
            Expr::Select(c, a, b) => {
                c.referenced_tensors(params, funcs);
                a.referenced_tensors(params, funcs);
                b.referenced_tensors(params, funcs);
            }
        }
    }

    /// Substitute occurrences of variable `name` by `replacement`.
    pub fn substitute(&self, name: &str, replacement: &Expr) -> Expr {
        let walk = |e: &Expr| e.substitute(name, replacement);
        match self {
            Expr::Var(n) if n == name => replacement.clone(),
            Expr::IntConst(_) | Expr::FloatConst(_) | Expr::Var(_) => self.clone(),
            Expr::ParamRef(n, idx) => Expr::ParamRef(n.clone(), idx.iter().map(walk).collect()),
            Expr::FuncRef(n, idx) => Expr::FuncRef(n.clone(), idx.iter().map(walk).collect()),
            Expr::Call(n, args) => Expr::Call(n.clone(), args.iter().map(walk).collect()),
            Expr::Binary(op, a, b) => Expr::bin(*op, walk(a), walk(b)),
            Expr::Select(c, a, b) => {
                Expr::Select(Box::new(walk(c)), Box::new(walk(a)), Box::new(walk(b)))
            }
        }
    }

    /// Rename a variable wherever it occurs.
    pub fn rename_var(&self, from: &str, to: &str) -> Expr {
        self.substitute(from, &Expr::Var(to.to_string()))
    }

    /// Constant-fold what can be folded without an environment.
    pub fn fold(&self) -> Expr {
        match self {
            Expr::Binary(op, a, b) => {
                let a = a.fold();
                let b = b.fold();
                if let (Some(x), Some(y)) = (a.as_int(), b.as_int()) {
                    let v = match op {
                        BinOp::Add => Some(x.wrapping_add(y)),
                        BinOp::Sub => Some(x.wrapping_sub(y)),
                        BinOp::Mul => Some(x.wrapping_mul(y)),
                        BinOp::Div if y != 0 => Some(x.div_euclid(y)),
                        BinOp::Mod if y != 0 => Some(x.rem_euclid(y)),
                        BinOp::Min => Some(x.min(y)),
                        BinOp::Max => Some(x.max(y)),
                        BinOp::Lt => Some((x < y) as i64),
                        BinOp::Le => Some((x <= y) as i64),
                        BinOp::Eq => Some((x == y) as i64),
                        BinOp::And => Some((x != 0 && y != 0) as i64),
                        BinOp::Or => Some((x != 0 || y != 0) as i64),
                        _ => None,
                    };
                    if let Some(v) = v {
                        return Expr::IntConst(v);
                    }
                }
                // Short-circuit folds with one constant side.
                match (op, a.as_int(), b.as_int()) {
                    (BinOp::And, Some(0), _) | (BinOp::And, _, Some(0)) => Expr::IntConst(0),
                    (BinOp::And, Some(x), _) if x != 0 => b,
                    (BinOp::And, _, Some(y)) if y != 0 => a,
                    (BinOp::Add, Some(0), _) => b,
                    (BinOp::Add, _, Some(0)) => a,
                    _ => Expr::bin(*op, a, b),
                }
            }
            Expr::Select(c, a, b) => {
                let c = c.fold();
                match c.as_int() {
                    Some(0) => b.fold(),
                    Some(_) => a.fold(),
                    None => Expr::Select(Box::new(c), Box::new(a.fold()), Box::new(b.fold())),
                }
            }
            Expr::ParamRef(n, idx) => {
                Expr::ParamRef(n.clone(), idx.iter().map(|e| e.fold()).collect())
            }
            Expr::FuncRef(n, idx) => {
                Expr::FuncRef(n.clone(), idx.iter().map(|e| e.fold()).collect())
            }
            Expr::Call(n, args) => Expr::Call(n.clone(), args.iter().map(|e| e.fold()).collect()),
            _ => self.clone(),
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Expr::IntConst(v) => Some(*v),
            _ => None,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => match op {
                BinOp::Or => 1,
                BinOp::And => 2,
                BinOp::Lt | BinOp::Le | BinOp::Eq => 3,
                BinOp::Add | BinOp::Sub => 4,
                BinOp::Mul | BinOp::Div | BinOp::Mod => 5,
                BinOp::Min | BinOp::Max => 8,
            },
            _ => 9,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list(f: &mut fmt::Formatter<'_>, items: &[Expr]) -> fmt::Result {
            for (i, e) in items.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{e}")?;
            }
            Ok(())
        }
        match self {
            Expr::IntConst(v) => write!(f, "{v}"),
            Expr::FloatConst(v) => write!(f, "{v}"),
            Expr::Var(n) => write!(f, "{n}"),
            Expr::ParamRef(n, idx) | Expr::FuncRef(n, idx) => {
                if idx.is_empty() {
                    write!(f, "{n}")
                } else {
                    write!(f, "{n}(")?;
                    list(f, idx)?;
                    write!(f, ")")
                }
            }
            Expr::Call(n, args) => {
                write!(f, "{n}(")?;
                list(f, args)?;
                write!(f, ")")
            }
            Expr::Binary(op, a, b) => match op {
                BinOp::Min | BinOp::Max => write!(f, "{}({a}, {b})", op.symbol()),
                _ => {
                    let p = self.precedence();
                    let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr| {
                        if e.precedence() < p {
                            write!(f, "({e})")
                        } else {
                            write!(f, "{e}")
                        }
                    };
                    wrap(f, a)?;
                    write!(f, " {} ", op.symbol())?;
                    wrap(f, b)
                }
            },
            Expr::Select(c, a, b) => write!(f, "select({c}, {a}, {b})"),
        }
    }
}

/// Evaluation context: how tensor and call references resolve to values.
pub trait EvalContext {
    fn var(&self, name: &str) -> Option<Scalar>;
    fn param_elem(&mut self, name: &str, idx: &[i64]) -> Result<Scalar, EvalError>;
    fn func_elem(&mut self, name: &str, idx: &[i64]) -> Result<Scalar, EvalError>;
    fn call(&mut self, name: &str, args: &[Scalar]) -> Result<Scalar, EvalError>;
}

pub fn eval(expr: &Expr, ctx: &mut dyn EvalContext) -> Result<Scalar, EvalError> {
    match expr {
        Expr::IntConst(v) => Ok(Scalar::Int(*v)),
        Expr::FloatConst(v) => Ok(Scalar::Float(*v)),
        Expr::Var(n) => ctx.var(n).ok_or_else(|| EvalError::UnknownName(n.clone())),
        Expr::ParamRef(n, idx) => {
            let idxs = eval_indices(idx, ctx)?;
            ctx.param_elem(n, &idxs)
        }
        Expr::FuncRef(n, idx) => {
            let idxs = eval_indices(idx, ctx)?;
            ctx.func_elem(n, &idxs)
        }
        Expr::Call(n, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval(a, ctx)?);
            }
            ctx.call(n, &vals)
        }
        Expr::Binary(op, a, b) => {
            match op {
                // && and || short-circuit so guards can shield later operands
                BinOp::And => {
                    let av = eval(a, ctx)?;
                    if !av.truthy() {
                        return Ok(Scalar::Int(0));
                    }
                    let bv = eval(b, ctx)?;
                    return Ok(Scalar::Int(bv.truthy() as i64));
                }
                BinOp::Or => {
                    let av = eval(a, ctx)?;
                    if av.truthy() {
                        return Ok(Scalar::Int(1));
                    }
                    let bv = eval(b, ctx)?;
                    return Ok(Scalar::Int(bv.truthy() as i64));
                }
                _ => {}
            }
            let av = eval(a, ctx)?;
            let bv = eval(b, ctx)?;
            Ok(match op {
                BinOp::Add => scalar_add(av, bv),
                BinOp::Sub => scalar_sub(av, bv),
                BinOp::Mul => scalar_mul(av, bv),
                BinOp::Div => scalar_div(av, bv)?,
                BinOp::Mod => scalar_mod(av, bv)?,
                BinOp::Min => scalar_min(av, bv),
                BinOp::Max => scalar_max(av, bv),
                BinOp::Lt => scalar_lt(av, bv),
                BinOp::Le => scalar_le(av, bv),
                BinOp::Eq => scalar_eq(av, bv),
                BinOp::And | BinOp::Or => unreachable!(),
            })
        }
        Expr::Select(c, a, b) => {
            if eval(c, ctx)?.truthy() {
                eval(a, ctx)
            } else {
                eval(b, ctx)
            }
        }
    }
}

pub fn eval_indices(idx: &[Expr], ctx: &mut dyn EvalContext) -> Result<Vec<i64>, EvalError> {
    let mut out = Vec::with_capacity(idx.len());
    for e in idx {
        out.push(eval(e, ctx)?.as_index()?);
    }
    Ok(out)
}

/// Context over a plain variable environment, for bounds, guards and index
/// arithmetic that must not touch tensors.
pub struct PureContext<'a> {
    pub env: &'a std::collections::BTreeMap<String, i64>,
    pub binding: Option<&'a crate::value::Binding>,
    pub externs: Option<&'a crate::externs::Registry>,
}

impl<'a> EvalContext for PureContext<'a> {
    fn var(&self, name: &str) -> Option<Scalar> {
        if let Some(v) = self.env.get(name) {
            return Some(Scalar::Int(*v));
        }
        self.binding.and_then(|b| b.scalar(name))
    }

    fn param_elem(&mut self, name: &str, _idx: &[i64]) -> Result<Scalar, EvalError> {
        // Scalar parameters evaluate through the binding.
        if let Some(b) = self.binding {
            if let Some(s) = b.scalar(name) {
                return Ok(s);
            }
        }
        Err(EvalError::UnknownName(name.to_string()))
    }

    fn func_elem(&mut self, name: &str, _idx: &[i64]) -> Result<Scalar, EvalError> {
        Err(EvalError::UnknownName(name.to_string()))
    }

    fn call(&mut self, name: &str, args: &[Scalar]) -> Result<Scalar, EvalError> {
        if let Some(reg) = self.externs {
            if let Some(f) = reg.pure_fn(name) {
                return f(args);
            }
        }
        Err(EvalError::UnboundExtern(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ev(e: &Expr, env: &[(&str, i64)]) -> Scalar {
        let env: BTreeMap<String, i64> = env.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let mut ctx = PureContext {
            env: &env,
            binding: None,
            externs: None,
        };
        eval(e, &mut ctx).unwrap()
    }

    #[test]
    fn arithmetic_and_compare() {
        let e = Expr::add(Expr::mul(Expr::var("i"), Expr::int(3)), Expr::int(1));
        assert_eq!(ev(&e, &[("i", 2)]), Scalar::Int(7));
        let c = Expr::and(
            Expr::eq(Expr::var("i"), Expr::int(0)),
            Expr::eq(Expr::var("j"), Expr::int(0)),
        );
        assert_eq!(ev(&c, &[("i", 0), ("j", 0)]), Scalar::Int(1));
        assert_eq!(ev(&c, &[("i", 0), ("j", 2)]), Scalar::Int(0));
    }

    #[test]
    fn display_round_trips_structure() {
        let e = Expr::add(Expr::mul(Expr::var("y"), Expr::var("S")), Expr::var("ky"));
        assert_eq!(e.to_string(), "y * S + ky");
        let g = Expr::mul(Expr::add(Expr::var("y"), Expr::var("S")), Expr::var("ky"));
        assert_eq!(g.to_string(), "(y + S) * ky");
    }

    #[test]
    fn fold_guards() {
        let g = Expr::eq(Expr::int(3), Expr::int(3));
        assert_eq!(g.fold(), Expr::IntConst(1));
        let dead = Expr::and(Expr::int(0), Expr::var("x"));
        assert_eq!(dead.fold(), Expr::IntConst(0));
    }
}
