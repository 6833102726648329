//! Sequential reference interpreter: the ground-truth oracle the spatial
//! mapping is verified against, plus assumption checking.

use std::collections::BTreeMap;

use crate::error::{EvalError, IrError};
use crate::externs::{ArgValue, InterpExtern, Registry};
use crate::ir::expr::{BinOp, Expr};
use crate::ir::lower::{lower_to_loop_nest, BodyStmt};
use crate::ir::{Assumption, Program};
use crate::value::{
    scalar_add, scalar_div, scalar_eq, scalar_le, scalar_lt, scalar_max, scalar_min, scalar_mod,
    scalar_mul, scalar_sub, Binding, ElemType, Scalar, Tensor,
};

/// A function element: a scalar, or a whole stream for extern-merged values.
#[derive(Debug, Clone, PartialEq)]
pub enum IValue {
    S(Scalar),
    Seq(Vec<Scalar>),
}

#[derive(Debug, Clone, Default)]
pub struct InterpOutputs {
    /// Per-function dense outputs, restricted to the store region if set.
    pub outputs: BTreeMap<String, Tensor>,
}

struct InterpState<'a> {
    program: &'a Program,
    binding: &'a Binding,
    registry: &'a Registry,
    maps: BTreeMap<String, BTreeMap<Vec<i64>, IValue>>,
    stateful: BTreeMap<String, Box<dyn InterpExtern>>,
    env: BTreeMap<String, i64>,
    /// Function currently being evaluated: its extern signature, if any,
    /// implements the call on its right-hand side.
    current_func: String,
}

impl<'a> InterpState<'a> {
    fn var(&self, name: &str) -> Option<Scalar> {
        if let Some(v) = self.env.get(name) {
            return Some(Scalar::Int(*v));
        }
        self.binding.scalar(name)
    }

    fn eval_scalar(&mut self, e: &Expr) -> Result<Scalar, EvalError> {
        match self.eval(e)? {
            IValue::S(s) => Ok(s),
            IValue::Seq(_) => Err(EvalError::ExternFault {
                name: "<interp>".into(),
                message: "stream value used where a scalar is required".into(),
            }),
        }
    }

    fn eval_index_vec(&mut self, idx: &[Expr]) -> Result<Vec<i64>, EvalError> {
        let mut out = Vec::with_capacity(idx.len());
        for e in idx {
            out.push(self.eval_scalar(e)?.as_index()?);
        }
        Ok(out)
    }

    fn param_tensor(&self, name: &str) -> Result<&Tensor, EvalError> {
        self.binding
            .tensor(name)
            .ok_or_else(|| EvalError::UnknownName(name.to_string()))
    }

    fn eval(&mut self, e: &Expr) -> Result<IValue, EvalError> {
        match e {
            Expr::IntConst(v) => Ok(IValue::S(Scalar::Int(*v))),
            Expr::FloatConst(v) => Ok(IValue::S(Scalar::Float(*v))),
            Expr::Var(n) => self
                .var(n)
                .map(IValue::S)
                .ok_or_else(|| EvalError::UnknownName(n.clone())),
            Expr::ParamRef(n, idx) => {
                if let Some(s) = self.binding.scalar(n) {
                    return Ok(IValue::S(s));
                }
                let rank = self.param_tensor(n)?.rank();
                let idxs = self.eval_index_vec(idx)?;
                let t = self.param_tensor(n)?;
                if idxs.len() == rank {
                    t.get(&idxs)
                        .map(IValue::S)
                        .ok_or_else(|| EvalError::OutOfBoundsRead {
                            name: n.clone(),
                            index: idxs,
                        })
                } else {
                    // Partial reference: the remaining axis streams out in order.
                    Ok(IValue::Seq(stream_of(t, &idxs)?))
                }
            }
            Expr::FuncRef(n, idx) => {
                // A function backed by an imperative implementation behaves
                // as a stateful call site, not a tensor lookup.
                if let Some(f) = self.program.func(n) {
                    if f.definitions.is_empty() {
                        if let Some(sig) = self.program.extern_sig(n) {
                            let impl_name = sig.impl_name.clone();
                            return self.eval_stateful_call_keyed(n, &impl_name, idx);
                        }
                    }
                }
                let idxs = self.eval_index_vec(idx)?;
                let map = self
                    .maps
                    .get(n)
                    .ok_or_else(|| EvalError::UnknownName(n.clone()))?;
                map.get(&idxs)
                    .cloned()
                    .ok_or_else(|| EvalError::OutOfBoundsRead {
                        name: n.clone(),
                        index: idxs,
                    })
            }
            Expr::Call(n, args) => {
                if self.registry.is_stateful(n) || self.program.func(n).is_some() {
                    return self.eval_stateful_call(n, args);
                }
                // An undeclared call inside an extern-implemented function's
                // own definition is that function's implementation.
                if self.registry.pure_fn(n).is_none() {
                    if let Some(sig) = self.program.extern_sig(&self.current_func) {
                        let key = self.current_func.clone();
                        let impl_name = sig.impl_name.clone();
                        return self.eval_stateful_call_keyed(&key, &impl_name, args);
                    }
                }
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval_scalar(a)?);
                }
                match self.registry.pure_fn(n) {
                    Some(f) => Ok(IValue::S(f(&vals)?)),
                    None => Err(EvalError::UnboundExtern(n.clone())),
                }
            }
            Expr::Binary(op, a, b) => {
                match op {
                    BinOp::And => {
                        let av = self.eval_scalar(a)?;
                        if !av.truthy() {
                            return Ok(IValue::S(Scalar::Int(0)));
                        }
                        let bv = self.eval_scalar(b)?;
                        return Ok(IValue::S(Scalar::Int(bv.truthy() as i64)));
                    }
                    BinOp::Or => {
                        let av = self.eval_scalar(a)?;
                        if av.truthy() {
                            return Ok(IValue::S(Scalar::Int(1)));
                        }
                        let bv = self.eval_scalar(b)?;
                        return Ok(IValue::S(Scalar::Int(bv.truthy() as i64)));
                    }
                    _ => {}
                }
                let av = self.eval_scalar(a)?;
                let bv = self.eval_scalar(b)?;
                Ok(IValue::S(match op {
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
                }))
            }
            Expr::Select(c, a, b) => {
                if self.eval_scalar(c)?.truthy() {
                    self.eval(a)
                } else {
                    self.eval(b)
                }
            }
        }
    }

    /// A stateful extern call. For a function implemented by an extern the
    /// call site's name is the function; its `define_extern` names the impl.
    fn eval_stateful_call(&mut self, name: &str, args: &[Expr]) -> Result<IValue, EvalError> {
        let impl_name = match self.program.extern_sig(name) {
            Some(sig) => sig.impl_name.clone(),
            None => name.to_string(),
        };
        self.eval_stateful_call_keyed(name, &impl_name, args)
    }

    /// State is kept per call-site function, never shared across functions.
    fn eval_stateful_call_keyed(
        &mut self,
        key: &str,
        impl_name: &str,
        args: &[Expr],
    ) -> Result<IValue, EvalError> {
        let mut vals = Vec::with_capacity(args.len());
        for a in args {
            vals.push(self.eval_arg(a)?);
        }
        let inst = match self.stateful.get_mut(key) {
            Some(i) => i,
            None => {
                let i = self
                    .registry
                    .interp_instance(impl_name)
                    .ok_or_else(|| EvalError::UnboundExtern(impl_name.to_string()))?;
                self.stateful.insert(key.to_string(), i);
                self.stateful.get_mut(key).unwrap()
            }
        };
        match inst.call(&vals)? {
            ArgValue::Scalar(s) => Ok(IValue::S(s)),
            ArgValue::Seq(s) => Ok(IValue::Seq(s)),
            ArgValue::Tensor(_) => Err(EvalError::ExternFault {
                name: key.to_string(),
                message: "extern returned a tensor".into(),
            }),
        }
    }

    fn eval_arg(&mut self, e: &Expr) -> Result<ArgValue, EvalError> {
        match e {
            Expr::ParamRef(n, idx) if self.binding.tensor(n).is_some() => {
                let rank = self.param_tensor(n)?.rank();
                if idx.is_empty() && rank > 0 {
                    return Ok(ArgValue::Tensor(self.param_tensor(n)?.clone()));
                }
                let idxs = self.eval_index_vec(idx)?;
                let t = self.param_tensor(n)?;
                if idxs.len() == rank {
                    Ok(ArgValue::Scalar(t.get(&idxs).ok_or_else(|| {
                        EvalError::OutOfBoundsRead {
                            name: n.clone(),
                            index: idxs,
                        }
                    })?))
                } else {
                    Ok(ArgValue::Seq(stream_of(t, &idxs)?))
                }
            }
            _ => match self.eval(e)? {
                IValue::S(s) => Ok(ArgValue::Scalar(s)),
                IValue::Seq(s) => Ok(ArgValue::Seq(s)),
            },
        }
    }
}

/// Elements of the trailing axes of `t` under a partial index, row-major.
fn stream_of(t: &Tensor, prefix: &[i64]) -> Result<Vec<Scalar>, EvalError> {
    let fixed = prefix.len();
    let mut out = Vec::new();
    let mut idx: Vec<i64> = prefix.to_vec();
    idx.resize(t.rank(), 0);
    fn walk(
        t: &Tensor,
        idx: &mut Vec<i64>,
        d: usize,
        out: &mut Vec<Scalar>,
    ) -> Result<(), EvalError> {
        if d == t.rank() {
            out.push(t.get(idx).ok_or_else(|| EvalError::OutOfBoundsRead {
                name: "<stream>".into(),
                index: idx.clone(),
            })?);
            return Ok(());
        }
        for i in 0..t.shape[d] {
            idx[d] = t.origin[d] + i as i64;
            walk(t, idx, d + 1, out)?;
        }
        Ok(())
    }
    walk(t, &mut idx, fixed, &mut out)?;
    Ok(out)
}

/// Interpret every function of the program in producer-to-consumer order.
/// Returns dense outputs restricted to store regions where present.
pub fn interpret(
    program: &Program,
    binding: &Binding,
    registry: &Registry,
) -> Result<InterpOutputs, IrError> {
    validate_binding(program, binding)?;
    let order = program.topo_order()?;
    let mut st = InterpState {
        program,
        binding,
        registry,
        maps: BTreeMap::new(),
        stateful: BTreeMap::new(),
        env: BTreeMap::new(),
        current_func: String::new(),
    };
    for fname in &order {
        let f = program.func(fname).unwrap();
        if f.definitions.is_empty() {
            // Extern-only functions have no temporal definition to interpret.
            st.maps.insert(fname.clone(), BTreeMap::new());
            continue;
        }
        let nest = lower_to_loop_nest(program, fname)?;
        st.maps.insert(fname.clone(), BTreeMap::new());
        st.current_func = fname.clone();
        let has_pure = f.definitions.iter().any(|d| !d.is_update);
        walk_loops(&mut st, &nest, 0, fname, has_pure)?;
    }
    let mut outputs = InterpOutputs::default();
    for f in &program.funcs {
        if f.definitions.is_empty() {
            continue;
        }
        let map = &st.maps[&f.name];
        let restricted: BTreeMap<Vec<i64>, IValue> = match &f.store_region {
            Some(region) => {
                let mut env_ctx = InterpState {
                    program,
                    binding,
                    registry,
                    maps: BTreeMap::new(),
                    stateful: BTreeMap::new(),
                    env: BTreeMap::new(),
                    current_func: String::new(),
                };
                let point = env_ctx.eval_index_vec(region).map_err(IrError::Eval)?;
                map.iter()
                    .filter(|(k, _)| **k == point)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            }
            None => map.clone(),
        };
        if let Some(t) = assemble_tensor(&restricted) {
            outputs.outputs.insert(f.name.clone(), t);
        }
    }
    Ok(outputs)
}

fn walk_loops(
    st: &mut InterpState,
    nest: &crate::ir::LoopNest,
    depth: usize,
    fname: &str,
    has_pure: bool,
) -> Result<(), IrError> {
    if depth == nest.loops.len() {
        return exec_body(st, nest, fname, has_pure);
    }
    let l = nest.loops[depth].clone();
    let lo = st
        .eval_scalar(&l.lo)
        .map_err(IrError::Eval)?
        .as_index()
        .map_err(IrError::Eval)?;
    let hi = st
        .eval_scalar(&l.hi)
        .map_err(IrError::Eval)?
        .as_index()
        .map_err(IrError::Eval)?;
    let mut i = lo;
    while i < hi {
        st.env.insert(l.var.clone(), i);
        walk_loops(st, nest, depth + 1, fname, has_pure)?;
        i += 1;
    }
    st.env.remove(&l.var);
    Ok(())
}

fn exec_body(
    st: &mut InterpState,
    nest: &crate::ir::LoopNest,
    fname: &str,
    has_pure: bool,
) -> Result<(), IrError> {
    // Bind lets for this iteration.
    let mut bound_lets = Vec::new();
    for (name, e) in &nest.lets {
        let v = st
            .eval_scalar(e)
            .map_err(IrError::Eval)?
            .as_index()
            .map_err(IrError::Eval)?;
        st.env.insert(name.clone(), v);
        bound_lets.push(name.clone());
    }
    for stmt in &nest.body {
        let s = match stmt {
            BodyStmt::Def(s) => s,
            _ => continue,
        };
        if let Some(g) = &s.guard {
            if !st.eval_scalar(g).map_err(IrError::Eval)?.truthy() {
                continue;
            }
        }
        let idx = st.eval_index_vec(&s.lhs_indices).map_err(IrError::Eval)?;
        let val = st.eval(&s.rhs).map_err(IrError::Eval)?;
        let map = st.maps.get_mut(fname).unwrap();
        if s.is_update {
            let cur = match map.get(&idx) {
                Some(IValue::S(s)) => *s,
                Some(IValue::Seq(_)) => {
                    return Err(IrError::Eval(EvalError::ExternFault {
                        name: fname.to_string(),
                        message: "update on a stream element".into(),
                    }))
                }
                None if !has_pure => match &val {
                    IValue::S(s) => Scalar::zero(s.elem_type()),
                    IValue::Seq(_) => Scalar::Int(0),
                },
                None => {
                    return Err(IrError::Eval(EvalError::OutOfBoundsRead {
                        name: fname.to_string(),
                        index: idx,
                    }))
                }
            };
            match val {
                IValue::S(v) => {
                    map.insert(idx, IValue::S(scalar_add(cur, v)));
                }
                IValue::Seq(_) => {
                    return Err(IrError::Eval(EvalError::ExternFault {
                        name: fname.to_string(),
                        message: "stream value in an update".into(),
                    }))
                }
            }
        } else {
            map.insert(idx, val);
        }
    }
    for name in bound_lets {
        st.env.remove(&name);
    }
    Ok(())
}

fn assemble_tensor(map: &BTreeMap<Vec<i64>, IValue>) -> Option<Tensor> {
    if map.is_empty() {
        return None;
    }
    // A single stream element becomes a 1-D tensor of its tokens.
    if map.len() == 1 {
        if let Some((_, IValue::Seq(s))) = map.iter().next() {
            let elem = if s.iter().any(|v| matches!(v, Scalar::Float(_))) {
                ElemType::Float
            } else {
                ElemType::Int
            };
            return Some(Tensor {
                elem,
                origin: vec![0],
                shape: vec![s.len()],
                data: s.clone(),
            });
        }
    }
    let mut scalars = BTreeMap::new();
    let mut any_float = false;
    for (k, v) in map {
        match v {
            IValue::S(s) => {
                any_float |= matches!(s, Scalar::Float(_));
                scalars.insert(k.clone(), *s);
            }
            IValue::Seq(_) => return None,
        }
    }
    let elem = if any_float {
        ElemType::Float
    } else {
        ElemType::Int
    };
    let mut t = Tensor::from_elems(elem, &scalars)?;
    if any_float {
        for v in &mut t.data {
            *v = Scalar::Float(v.as_f64());
        }
    }
    Some(t)
}

fn validate_binding(program: &Program, binding: &Binding) -> Result<(), IrError> {
    for p in &program.parameters {
        match binding.values.get(&p.name) {
            None => {
                return Err(IrError::Binding(format!(
                    "parameter `{}` not bound",
                    p.name
                )));
            }
            Some(crate::value::Bound::Scalar(_)) if p.rank == 0 => {}
            Some(crate::value::Bound::Tensor(t)) if p.rank > 0 => {
                if t.rank() != p.rank {
                    return Err(IrError::Binding(format!(
                        "tensor `{}` has rank {}, declared {}",
                        p.name,
                        t.rank(),
                        p.rank
                    )));
                }
            }
            Some(_) => {
                return Err(IrError::Binding(format!(
                    "parameter `{}` bound with the wrong kind",
                    p.name
                )));
            }
        }
    }
    for s in program.symbolic_constants() {
        if binding.scalar(&s).is_none() {
            return Err(IrError::Binding(format!(
                "symbolic constant `{s}` not bound"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub entries: Vec<(String, bool, String)>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|(_, ok, _)| *ok)
    }
}

/// Evaluate every assumption against a binding. Failures are report entries,
/// not errors.
pub fn check_assumptions(program: &Program, binding: &Binding) -> AssumptionReport {
    let mut entries = Vec::new();
    for a in &program.assumptions {
        let (ok, detail) = match a {
            Assumption::NoAlias(names) => {
                let missing: Vec<&String> = names
                    .iter()
                    .filter(|n| binding.tensor(n).is_none())
                    .collect();
                if missing.is_empty() {
                    (true, "tensors are distinct objects".to_string())
                } else {
                    (false, format!("unbound tensors: {missing:?}"))
                }
            }
            Assumption::SymbolicConstant(names) => {
                let missing: Vec<&String> = names
                    .iter()
                    .filter(|n| binding.scalar(n).is_none())
                    .collect();
                if missing.is_empty() {
                    (true, "all bound".to_string())
                } else {
                    (false, format!("unbound: {missing:?}"))
                }
            }
            Assumption::Divisible { dividend, divisor } => {
                match (binding.int(dividend), binding.int(divisor)) {
                    (Some(a), Some(b)) if b != 0 && a % b == 0 => (true, format!("{a} % {b} == 0")),
                    (Some(a), Some(b)) => (false, format!("{a} % {b} != 0")),
                    _ => (false, "operands not bound to integers".to_string()),
                }
            }
            Assumption::BoolExpr(e) => {
                let env = BTreeMap::new();
                let mut ctx = crate::ir::expr::PureContext {
                    env: &env,
                    binding: Some(binding),
                    externs: None,
                };
                match crate::ir::expr::eval(e, &mut ctx) {
                    Ok(v) => (v.truthy(), format!("{e} evaluates to {v}")),
                    Err(err) => (false, format!("evaluation failed: {err}")),
                }
            }
        };
        entries.push((a.to_string(), ok, detail));
    }
    AssumptionReport { entries }
}
