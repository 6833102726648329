//! Scheduling directives and the loop transformations they drive.
//!
//! Directives are applied one by one in the order they were written; loop
//! transforms rewrite the function's nest in place, while partitioning and
//! caching directives are recorded for graph construction.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ScheduleError;
use crate::externs::SigParam;
use crate::ir::expr::Expr;
use crate::ir::lower::{BodyStmt, Loop, LoopNest};
use crate::ir::Program;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferAttr {
    Double,
    Register,
}

impl fmt::Display for BufferAttr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BufferAttr::Double => write!(f, "DOUBLE"),
            BufferAttr::Register => write!(f, "REGISTER"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Directive {
    /// Raw tile argument list: original vars, new vars, then factors,
    /// resolved against the nest when applied.
    Tile {
        args: Vec<Expr>,
    },
    /// Loops listed innermost first; they must be adjacent levels.
    Reorder {
        vars: Vec<String>,
    },
    Unroll {
        vars: Vec<String>,
    },
    Remove {
        vars: Vec<String>,
    },
    Vectorize {
        var: String,
    },
    IsolateProducerChain {
        value: String,
        chain: Vec<String>,
    },
    IsolateConsumerChain {
        value: String,
        chain: Vec<String>,
    },
    Buffer {
        value: String,
        level: Option<String>,
        attrs: Vec<BufferAttr>,
    },
    LineBuffer {
        value: String,
        level: Option<String>,
    },
    Relay {
        value: String,
        direction: Vec<Expr>,
    },
    SetMinDepth {
        value: String,
        dest: String,
        depth: i64,
    },
    DefineExtern {
        impl_name: String,
        params: Vec<SigParam>,
    },
    /// Chain-call forms of the temporal declarations.
    SetBounds {
        var: String,
        lo: Expr,
        hi: Expr,
    },
    Store {
        region: Vec<Expr>,
    },
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn exprs(items: &[Expr]) -> String {
            items
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        }
        match self {
            Directive::Tile { args } => write!(f, "tile({})", exprs(args)),
            Directive::Reorder { vars } => write!(f, "reorder({})", vars.join(", ")),
            Directive::Unroll { vars } => write!(f, "unroll({})", vars.join(", ")),
            Directive::Remove { vars } => write!(f, "remove({})", vars.join(", ")),
            Directive::Vectorize { var } => write!(f, "vectorize({var})"),
            Directive::IsolateProducerChain { value, chain } => {
                write!(f, "isolate_producer_chain({value}, {})", chain.join(", "))
            }
            Directive::IsolateConsumerChain { value, chain } => {
                write!(f, "isolate_consumer_chain({value}, {})", chain.join(", "))
            }
            Directive::Buffer {
                value,
                level,
                attrs,
            } => {
                write!(f, "buffer({value}")?;
                if let Some(l) = level {
                    write!(f, ", {l}")?;
                }
                for a in attrs {
                    write!(f, ", {a}")?;
                }
                write!(f, ")")
            }
            Directive::LineBuffer { value, level } => {
                write!(f, "linebuffer({value}")?;
                if let Some(l) = level {
                    write!(f, ", {l}")?;
                }
                write!(f, ")")
            }
            Directive::Relay { value, direction } => {
                write!(f, "relay({value}, <{}>)", exprs(direction))
            }
            Directive::SetMinDepth { value, dest, depth } => {
                write!(f, "set_min_depth({value}, {dest}, {depth})")
            }
            Directive::DefineExtern { impl_name, params } => {
                let parts: Vec<String> = params
                    .iter()
                    .map(|p| match p {
                        SigParam::Scalar(n) => format!("int {n}"),
                        SigParam::Matrix(n) => format!("matrix {n}[]"),
                        SigParam::Channel { name, elem, array } => {
                            format!("channel {elem} {name}{}", if *array { "[]" } else { "" })
                        }
                    })
                    .collect();
                write!(
                    f,
                    "define_extern(\"{impl_name}\", void, {{{}}})",
                    parts.join(", ")
                )
            }
            Directive::SetBounds { var, lo, hi } => {
                write!(f, "set_bounds({var}, {lo}, {hi})")
            }
            Directive::Store { region } => write!(f, "store({})", exprs(region)),
        }
    }
}

/// Ordered directive records; order across functions matters because
/// isolation copies the consumer's nest as it stands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub items: Vec<(String, Directive)>,
}

impl Schedule {
    pub fn new() -> Schedule {
        Schedule::default()
    }

    pub fn push(&mut self, func: &str, d: Directive) -> &mut Self {
        self.items.push((func.to_string(), d));
        self
    }

    pub fn for_func<'a>(&'a self, func: &str) -> impl Iterator<Item = &'a Directive> {
        let func = func.to_string();
        self.items
            .iter()
            .filter(move |(f, _)| *f == func)
            .map(|(_, d)| d)
    }

    /// Loops each function will unroll, in directive order.
    pub fn unrolled_vars(&self, func: &str) -> Vec<String> {
        let mut out = Vec::new();
        for d in self.for_func(func) {
            if let Directive::Unroll { vars } = d {
                out.extend(vars.iter().cloned());
            }
        }
        out
    }
}

/// Tile one or more loops, possibly at several levels in one call.
///
/// The argument list is original vars, then new vars level by level, then
/// factors level by level; the resulting loop order is exactly the listed
/// order. Body uses of an original var `v` are rewritten to a primed sum
/// `v' = v + vv (+ vvv ...)`.
pub fn tile(nest: &mut LoopNest, args: &[Expr]) -> Result<(), ScheduleError> {
    let names: Vec<Option<String>> = args
        .iter()
        .map(|e| match e {
            Expr::Var(n) => Some(n.clone()),
            _ => None,
        })
        .collect();
    let mut n = 0usize;
    while n < args.len() {
        match &names[n] {
            Some(name) if nest.loop_index(name).is_some() => n += 1,
            _ => break,
        }
    }
    if n == 0 {
        if let Some(Expr::Var(v)) = args.first() {
            return Err(ScheduleError::UnknownVar(v.clone()));
        }
        return Err(ScheduleError::MalformedTile(
            "no leading loop variables".to_string(),
        ));
    }
    let rest = args.len() - n;
    if rest == 0 || !rest.is_multiple_of(2 * n) {
        return Err(ScheduleError::MalformedTile(format!(
            "{} arguments do not split into new vars and factors for {} loops",
            args.len(),
            n
        )));
    }
    let levels = rest / (2 * n);
    let new_vars: Vec<String> = args[n..n + n * levels]
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            Expr::Var(v) if nest.loop_index(v).is_none() => Ok(v.clone()),
            _ => Err(ScheduleError::MalformedTile(format!(
                "argument {} is not a fresh variable",
                n + i
            ))),
        })
        .collect::<Result<_, _>>()?;
    let factors: Vec<Expr> = args[n + n * levels..].to_vec();

    // Per original var: its factors (level major) and new vars.
    for k in 0..n {
        let orig = names[k].clone().unwrap();
        for l in 0..levels {
            let f = &factors[l * n + k];
            if let Some(v) = f.as_int() {
                if v <= 0 {
                    return Err(ScheduleError::NonPositiveFactor(orig.clone()));
                }
                if l == 0 {
                    let lp = &nest.loops[nest.loop_index(&orig).unwrap()];
                    if let (Some(lo), Some(hi)) = (lp.lo.as_int(), lp.hi.as_int()) {
                        let extent = hi - lo;
                        if v > extent && extent > 0 {
                            return Err(ScheduleError::FactorExceedsExtent {
                                var: orig.clone(),
                                factor: v,
                                extent,
                            });
                        }
                    }
                }
            }
        }
    }

    // Build the tiled group in listed order.
    let orig_loops: Vec<Loop> = (0..n)
        .map(|k| nest.loops[nest.loop_index(names[k].as_ref().unwrap()).unwrap()].clone())
        .collect();
    let insert_at = (0..n)
        .map(|k| nest.loop_index(names[k].as_ref().unwrap()).unwrap())
        .min()
        .unwrap();
    let mut group: Vec<Loop> = Vec::with_capacity(n * (levels + 1));
    for (k, orig) in orig_loops.iter().enumerate() {
        let mut l0 = orig.clone();
        l0.step = factors[k].clone();
        group.push(l0);
    }
    for l in 0..levels {
        for k in 0..n {
            let var = new_vars[l * n + k].clone();
            let extent = factors[l * n + k].clone();
            let step = if l + 1 < levels {
                factors[(l + 1) * n + k].clone()
            } else {
                Expr::int(1)
            };
            group.push(Loop {
                var,
                lo: Expr::int(0),
                hi: extent,
                step,
                unrolled: false,
                vectorized: false,
            });
        }
    }

    // Remove the original loops, splice in the group.
    let removed: BTreeSet<String> = (0..n).map(|k| names[k].clone().unwrap()).collect();
    let mut kept: Vec<Loop> = Vec::new();
    let mut spliced = false;
    for (i, l) in nest.loops.iter().enumerate() {
        if i == insert_at {
            kept.extend(group.iter().cloned());
            spliced = true;
        }
        if !removed.contains(&l.var) {
            kept.push(l.clone());
        }
    }
    if !spliced {
        kept.extend(group);
    }
    nest.loops = kept;

    // Rewrite uses of each original var to the primed sum.
    for k in 0..n {
        let orig = names[k].clone().unwrap();
        let mut sum = Expr::var(&orig);
        for l in 0..levels {
            sum = Expr::add(sum, Expr::var(&new_vars[l * n + k]));
        }
        let mut primed = format!("{orig}'");
        while nest.lets.iter().any(|(nm, _)| *nm == primed) {
            primed.push('\'');
        }
        rename_uses(nest, &orig, &primed);
        nest.lets.push((primed, sum));
        // Bounds of other loops may mention the original var.
        let full_sum = nest.lets.last().unwrap().1.clone();
        for l in nest.loops.iter_mut() {
            if !removed.contains(&l.var) {
                l.lo = l.lo.substitute(&orig, &full_sum);
                l.hi = l.hi.substitute(&orig, &full_sum);
            }
        }
    }
    Ok(())
}

fn rename_uses(nest: &mut LoopNest, from: &str, to: &str) {
    for (_, e) in nest.lets.iter_mut() {
        *e = e.rename_var(from, to);
    }
    for s in nest.body.iter_mut() {
        match s {
            BodyStmt::Def(st) => {
                if let Some(g) = &mut st.guard {
                    *g = g.rename_var(from, to);
                }
                for e in st.lhs_indices.iter_mut() {
                    *e = e.rename_var(from, to);
                }
                st.rhs = st.rhs.rename_var(from, to);
            }
            BodyStmt::ForwardRead { access, guard, .. }
            | BodyStmt::ForwardWrite { access, guard, .. } => {
                if let Some(g) = guard {
                    *g = g.rename_var(from, to);
                }
                for e in access.iter_mut() {
                    *e = e.rename_var(from, to);
                }
            }
        }
    }
}

/// Permute adjacent loops so their order matches the list, innermost first.
pub fn reorder(nest: &mut LoopNest, vars: &[String]) -> Result<(), ScheduleError> {
    let mut positions = Vec::new();
    for v in vars {
        match nest.loop_index(v) {
            Some(p) => positions.push(p),
            None => return Err(ScheduleError::UnknownVar(v.clone())),
        }
    }
    if positions.is_empty() {
        return Ok(());
    }
    let mut sorted = positions.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != positions.len() || sorted[sorted.len() - 1] - sorted[0] + 1 != sorted.len() {
        return Err(ScheduleError::NonAdjacentLoops(vars.to_vec()));
    }
    // The listed order reads innermost first: reverse it to get outer->inner.
    let replacement: Vec<Loop> = vars
        .iter()
        .rev()
        .map(|v| nest.loops[nest.loop_index(v).unwrap()].clone())
        .collect();
    for (slot, l) in (sorted[0]..=sorted[sorted.len() - 1]).zip(replacement) {
        nest.loops[slot] = l;
    }
    Ok(())
}

/// Mark loops fully unrolled; expansion into PEs happens at instantiation.
pub fn unroll(
    nest: &mut LoopNest,
    vars: &[String],
    symbolic: &BTreeSet<String>,
) -> Result<(), ScheduleError> {
    for v in vars {
        let idx = nest
            .loop_index(v)
            .ok_or_else(|| ScheduleError::UnknownVar(v.clone()))?;
        // The iteration set must be resolvable once symbolic constants are
        // bound: bounds may reference only constants, symbolic constants and
        // enclosing unrolled loops.
        let enclosing_unrolled: BTreeSet<String> = nest.loops[..idx]
            .iter()
            .filter(|l| l.unrolled || vars.contains(&l.var))
            .map(|l| l.var.clone())
            .collect();
        for e in [&nest.loops[idx].lo, &nest.loops[idx].hi] {
            for fv in e.free_var_set() {
                if !symbolic.contains(&fv) && !enclosing_unrolled.contains(&fv) {
                    return Err(ScheduleError::UnresolvableExtent(v.clone()));
                }
            }
        }
        nest.loops[idx].unrolled = true;
    }
    Ok(())
}

/// Find where a variable is still used, for the removal error message.
fn use_site(nest: &LoopNest, var: &str) -> Option<String> {
    let live = nest.used_vars();
    if !live.contains(var) {
        return None;
    }
    for s in &nest.body {
        let mut vars = s.free_vars();
        // Expand through let bindings.
        loop {
            let mut grew = false;
            for (name, e) in &nest.lets {
                if vars.contains(name) {
                    for v in e.free_var_set() {
                        grew |= vars.insert(v);
                    }
                }
            }
            if !grew {
                break;
            }
        }
        if vars.contains(var) {
            let site = match s {
                BodyStmt::Def(st) => format!(
                    "{}(..) {} {}",
                    nest.func,
                    if st.is_update { "+=" } else { "=" },
                    st.rhs
                ),
                BodyStmt::ForwardRead { value, .. } | BodyStmt::ForwardWrite { value, .. } => {
                    format!("forward {value}")
                }
            };
            return Some(site);
        }
    }
    Some("loop bounds or guards".to_string())
}

/// Delete loops whose variables the body never uses (guards count as uses).
pub fn remove(nest: &mut LoopNest, vars: &[String]) -> Result<(), ScheduleError> {
    for v in vars {
        if nest.loop_index(v).is_none() {
            return Err(ScheduleError::UnknownVar(v.clone()));
        }
    }
    for v in vars {
        if let Some(site) = use_site(nest, v) {
            return Err(ScheduleError::VarStillUsed {
                var: v.clone(),
                site,
            });
        }
        // Inner loop bounds may also reference it.
        let idx = nest.loop_index(v).unwrap();
        for l in &nest.loops {
            if l.var != *v && (l.lo.uses_var(v) || l.hi.uses_var(v) || l.step.uses_var(v)) {
                return Err(ScheduleError::VarStillUsed {
                    var: v.clone(),
                    site: format!("bounds of loop {}", l.var),
                });
            }
        }
        nest.loops.remove(idx);
    }
    nest.prune_dead_lets();
    Ok(())
}

/// Mark the innermost loop vectorized: its iterations run in lock step,
/// consuming and producing vector tokens of width = extent.
pub fn vectorize(
    nest: &mut LoopNest,
    var: &str,
    symbolic: &BTreeSet<String>,
) -> Result<(), ScheduleError> {
    let idx = nest
        .loop_index(var)
        .ok_or_else(|| ScheduleError::UnknownVar(var.to_string()))?;
    if idx + 1 != nest.loops.len() {
        return Err(ScheduleError::NotInnermost(var.to_string()));
    }
    for e in [&nest.loops[idx].lo, &nest.loops[idx].hi] {
        for fv in e.free_var_set() {
            if !symbolic.contains(&fv) {
                return Err(ScheduleError::UnresolvableExtent(var.to_string()));
            }
        }
    }
    nest.loops[idx].vectorized = true;
    Ok(())
}

/// Apply one loop-transformation directive to a nest. Partitioning, caching
/// and forwarding directives are recorded elsewhere.
pub fn apply_loop_directive(
    nest: &mut LoopNest,
    d: &Directive,
    symbolic: &BTreeSet<String>,
) -> Result<bool, ScheduleError> {
    match d {
        Directive::Tile { args } => {
            tile(nest, args)?;
            Ok(true)
        }
        Directive::Reorder { vars } => {
            reorder(nest, vars)?;
            Ok(true)
        }
        Directive::Unroll { vars } => {
            unroll(nest, vars, symbolic)?;
            Ok(true)
        }
        Directive::Remove { vars } => {
            remove(nest, vars)?;
            Ok(true)
        }
        Directive::Vectorize { var } => {
            vectorize(nest, var, symbolic)?;
            Ok(true)
        }
        _ => Ok(false),
    }
}

/// A single legality finding from the static check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub func: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.func, self.message)
    }
}

/// Dry-run the whole schedule, collecting every violation without applying
/// anything to the caller's state.
pub fn static_legality_check(program: &Program, schedule: &Schedule) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let symbolic = program.symbolic_constants();
    let mut nests: std::collections::BTreeMap<String, LoopNest> = std::collections::BTreeMap::new();
    let mut declared: BTreeSet<String> = program.funcs.iter().map(|f| f.name.clone()).collect();
    for f in &program.funcs {
        if !f.definitions.is_empty() {
            match crate::ir::lower::lower_to_loop_nest(program, &f.name) {
                Ok(n) => {
                    nests.insert(f.name.clone(), n);
                }
                Err(e) => diags.push(Diagnostic {
                    func: f.name.clone(),
                    message: e.to_string(),
                }),
            }
        }
    }
    let mut isolated_values: BTreeSet<(String, String)> = BTreeSet::new();
    for (func, d) in &schedule.items {
        if !declared.contains(func) {
            diags.push(Diagnostic {
                func: func.clone(),
                message: format!("unknown function `{func}`"),
            });
            continue;
        }
        match d {
            Directive::Tile { .. }
            | Directive::Reorder { .. }
            | Directive::Unroll { .. }
            | Directive::Remove { .. }
            | Directive::Vectorize { .. } => match nests.get_mut(func) {
                Some(nest) => {
                    if let Err(e) = apply_loop_directive(nest, d, &symbolic) {
                        diags.push(Diagnostic {
                            func: func.clone(),
                            message: e.to_string(),
                        });
                    }
                }
                None => diags.push(Diagnostic {
                    func: func.clone(),
                    message: format!("loop transformation on `{func}` which has no loop nest"),
                }),
            },
            Directive::IsolateProducerChain { value, chain }
            | Directive::IsolateConsumerChain { value, chain } => {
                if chain.is_empty() {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: "isolation chain is empty".to_string(),
                    });
                }
                for c in chain {
                    if !declared.contains(c) {
                        diags.push(Diagnostic {
                            func: func.clone(),
                            message: format!("chain function `{c}` is not declared"),
                        });
                    }
                }
                // Chain functions receive a copy of the target's nest,
                // specialized to forward the value; later loop transforms
                // apply to that copy.
                if let Some(target_nest) = nests.get(func).cloned() {
                    let body = match d {
                        Directive::IsolateProducerChain { .. } => {
                            crate::layout::forward_read_body(&target_nest, value)
                        }
                        _ => crate::layout::forward_write_body(program, &target_nest, func, value),
                    };
                    for c in chain {
                        if program.extern_sig(c).is_some() {
                            continue;
                        }
                        let entry = nests.entry(c.clone()).or_insert_with(|| LoopNest {
                            func: c.clone(),
                            loops: target_nest.loops.clone(),
                            lets: target_nest.lets.clone(),
                            body: Vec::new(),
                        });
                        for (lname, le) in &target_nest.lets {
                            if !entry.lets.iter().any(|(x, _)| x == lname) {
                                entry.lets.push((lname.clone(), le.clone()));
                            }
                        }
                        entry.body.extend(body.iter().cloned());
                        entry.prune_dead_lets();
                    }
                }
                let consumer = matches!(d, Directive::IsolateProducerChain { .. });
                let known_value = program.param(value).is_some() || declared.contains(value);
                if !known_value {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!("unknown value `{value}`"),
                    });
                } else if consumer {
                    // The function must read the value (or be extern-defined,
                    // where reads are not statically visible).
                    if let Some(f) = program.func(func) {
                        if !f.definitions.is_empty() {
                            let mut params = BTreeSet::new();
                            let mut funcs = BTreeSet::new();
                            for def in &f.definitions {
                                def.rhs.referenced_tensors(&mut params, &mut funcs);
                                for e in &def.lhs_indices {
                                    e.referenced_tensors(&mut params, &mut funcs);
                                }
                            }
                            if !params.contains(value) && !funcs.contains(value) && value != func {
                                diags.push(Diagnostic {
                                    func: func.clone(),
                                    message: format!(
                                        "function `{func}` does not consume value `{value}`"
                                    ),
                                });
                            }
                        }
                    }
                } else if value != func {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!(
                            "consumer chains isolate the function's own value, not `{value}`"
                        ),
                    });
                }
                if !isolated_values.insert((func.clone(), format!("{d}"))) {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!("duplicate isolation `{d}`"),
                    });
                }
            }
            Directive::Relay { value, direction } => {
                let unrolled = schedule.unrolled_vars(func);
                if unrolled.is_empty() {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!("relay({value}, ..) on `{func}` which unrolls no loops"),
                    });
                } else if unrolled.len() != direction.len() {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!(
                            "relay direction has {} components but `{func}` unrolls {} loops",
                            direction.len(),
                            unrolled.len()
                        ),
                    });
                }
                for e in direction {
                    for v in e.free_var_set() {
                        if !symbolic.contains(&v) && !unrolled.contains(&v) {
                            diags.push(Diagnostic {
                                func: func.clone(),
                                message: format!(
                                    "relay direction uses `{v}` which is neither a symbolic constant nor an unrolled loop"
                                ),
                            });
                        }
                    }
                }
            }
            Directive::Buffer { value, level, .. } | Directive::LineBuffer { value, level } => {
                let _ = value;
                if let (Some(level), Some(nest)) = (level, nests.get(func)) {
                    if nest.loop_index(level).is_none() {
                        diags.push(Diagnostic {
                            func: func.clone(),
                            message: format!("buffer level `{level}` is not a loop of `{func}`"),
                        });
                    }
                }
            }
            Directive::SetMinDepth { dest, depth, .. } => {
                if !declared.contains(dest) {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!("set_min_depth destination `{dest}` is not declared"),
                    });
                }
                if *depth < 1 {
                    diags.push(Diagnostic {
                        func: func.clone(),
                        message: format!("set_min_depth depth {depth} must be at least 1"),
                    });
                }
            }
            Directive::DefineExtern { .. } => {}
            Directive::SetBounds { .. } | Directive::Store { .. } => {}
        }
        declared.insert(func.clone());
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::lower::Statement;

    fn two_loop_nest() -> LoopNest {
        LoopNest {
            func: "A".into(),
            loops: vec![
                Loop::unit("i", Expr::int(0), Expr::var("I")),
                Loop::unit("j", Expr::int(0), Expr::var("J")),
            ],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: None,
                lhs_indices: vec![Expr::var("i"), Expr::var("j")],
                rhs: Expr::param("B", vec![Expr::var("i"), Expr::var("j")]),
                is_update: false,
            })],
        }
    }

    #[test]
    fn tile_two_loops_single_level() {
        let mut nest = two_loop_nest();
        let args: Vec<Expr> = ["i", "j", "ii", "jj", "II", "JJ"]
            .iter()
            .map(|s| Expr::var(s))
            .collect();
        tile(&mut nest, &args).unwrap();
        let order: Vec<&str> = nest.loops.iter().map(|l| l.var.as_str()).collect();
        assert_eq!(order, vec!["i", "j", "ii", "jj"]);
        assert_eq!(nest.loops[0].step, Expr::var("II"));
        assert_eq!(nest.loops[2].lo, Expr::int(0));
        assert_eq!(nest.loops[2].hi, Expr::var("II"));
        assert_eq!(nest.loops[2].step, Expr::int(1));
        assert_eq!(nest.lets.len(), 2);
        assert_eq!(nest.lets[0].0, "i'");
        assert_eq!(nest.lets[0].1.to_string(), "i + ii");
        // Body refs now use the primed names.
        if let BodyStmt::Def(st) = &nest.body[0] {
            assert_eq!(st.lhs_indices[0].to_string(), "i'");
        } else {
            panic!("expected def");
        }
    }

    #[test]
    fn tile_factor_equal_extent_one_outer_iteration() {
        let mut nest = LoopNest {
            func: "A".into(),
            loops: vec![Loop::unit("i", Expr::int(0), Expr::int(4))],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: None,
                lhs_indices: vec![Expr::var("i")],
                rhs: Expr::int(1),
                is_update: false,
            })],
        };
        tile(&mut nest, &[Expr::var("i"), Expr::var("ii"), Expr::int(4)]).unwrap();
        assert_eq!(nest.loops.len(), 2);
        assert_eq!(nest.loops[0].step, Expr::int(4));
        // Outer loop runs once: 0..4 step 4.
        assert!(tile(
            &mut LoopNest {
                func: "A".into(),
                loops: vec![Loop::unit("i", Expr::int(0), Expr::int(4))],
                lets: vec![],
                body: vec![],
            },
            &[Expr::var("i"), Expr::var("ii"), Expr::int(8)]
        )
        .is_err());
    }

    #[test]
    fn sgemm_two_level_tile_order_and_lets() {
        let mut nest = LoopNest {
            func: "C".into(),
            loops: vec![
                Loop::unit("i", Expr::int(0), Expr::var("I")),
                Loop::unit("j", Expr::int(0), Expr::var("J")),
                Loop::unit("k", Expr::int(0), Expr::var("K")),
            ],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: Some(Expr::eq(Expr::var("k"), Expr::int(0))),
                lhs_indices: vec![Expr::var("i"), Expr::var("j")],
                rhs: Expr::int(0),
                is_update: false,
            })],
        };
        let args: Vec<Expr> = [
            "i", "j", "k", "ii", "jj", "kk", "iii", "jjj", "kkk", "II", "JJ", "KK", "III", "JJJ",
            "KKK",
        ]
        .iter()
        .map(|s| Expr::var(s))
        .collect();
        tile(&mut nest, &args).unwrap();
        let order: Vec<&str> = nest.loops.iter().map(|l| l.var.as_str()).collect();
        assert_eq!(
            order,
            vec!["i", "j", "k", "ii", "jj", "kk", "iii", "jjj", "kkk"]
        );
        assert_eq!(nest.loops[3].hi, Expr::var("II"));
        assert_eq!(nest.loops[3].step, Expr::var("III"));
        assert_eq!(nest.loops[8].hi, Expr::var("KKK"));
        assert_eq!(nest.lets[2].1.to_string(), "k + kk + kkk");
        if let BodyStmt::Def(st) = &nest.body[0] {
            assert_eq!(st.guard.as_ref().unwrap().to_string(), "k' == 0");
        }
    }

    #[test]
    fn reorder_innermost_first_semantics() {
        // reorder(a, b) on b-outer/a-inner keeps order; reorder(b, a) swaps.
        let mk = || LoopNest {
            func: "F".into(),
            loops: vec![
                Loop::unit("b", Expr::int(0), Expr::int(2)),
                Loop::unit("a", Expr::int(0), Expr::int(2)),
            ],
            lets: vec![],
            body: vec![],
        };
        let mut n1 = mk();
        reorder(&mut n1, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            n1.loops.iter().map(|l| l.var.as_str()).collect::<Vec<_>>(),
            vec!["b", "a"]
        );
        let mut n2 = mk();
        reorder(&mut n2, &["b".into(), "a".into()]).unwrap();
        assert_eq!(
            n2.loops.iter().map(|l| l.var.as_str()).collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        // Single-loop reorder is a no-op.
        let mut n3 = mk();
        reorder(&mut n3, &["a".into()]).unwrap();
        assert_eq!(n3.loops[0].var, "b");
    }

    #[test]
    fn reorder_requires_adjacency() {
        let mut nest = LoopNest {
            func: "F".into(),
            loops: vec![
                Loop::unit("a", Expr::int(0), Expr::int(2)),
                Loop::unit("b", Expr::int(0), Expr::int(2)),
                Loop::unit("c", Expr::int(0), Expr::int(2)),
            ],
            lets: vec![],
            body: vec![],
        };
        let err = reorder(&mut nest, &["c".into(), "a".into()]);
        assert!(matches!(err, Err(ScheduleError::NonAdjacentLoops(_))));
    }

    #[test]
    fn remove_checks_uses_including_guards() {
        let mut nest = two_loop_nest();
        // Body reads B(i, j): removing j must fail and name the expression.
        let err = remove(&mut nest, &["j".into()]);
        match err {
            Err(ScheduleError::VarStillUsed { var, .. }) => assert_eq!(var, "j"),
            other => panic!("expected VarStillUsed, got {other:?}"),
        }
        // A guard use alone also blocks removal.
        let mut nest = LoopNest {
            func: "F".into(),
            loops: vec![
                Loop::unit("i", Expr::int(0), Expr::int(2)),
                Loop::unit("k", Expr::int(0), Expr::int(2)),
            ],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: Some(Expr::eq(Expr::var("k"), Expr::int(0))),
                lhs_indices: vec![Expr::var("i")],
                rhs: Expr::int(0),
                is_update: false,
            })],
        };
        assert!(remove(&mut nest, &["k".into()]).is_err());
        // An unused loop of extent 1 removes cleanly.
        let mut nest2 = LoopNest {
            func: "F".into(),
            loops: vec![
                Loop::unit("i", Expr::int(0), Expr::int(2)),
                Loop::unit("z", Expr::int(0), Expr::int(1)),
            ],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: None,
                lhs_indices: vec![Expr::var("i")],
                rhs: Expr::int(0),
                is_update: false,
            })],
        };
        remove(&mut nest2, &["z".into()]).unwrap();
        assert_eq!(nest2.loops.len(), 1);
    }

    #[test]
    fn remove_through_dead_lets_is_allowed() {
        // After tiling, j' = j + jj is dead if the body never mentions j'.
        let mut nest = LoopNest {
            func: "F".into(),
            loops: vec![
                Loop::unit("i", Expr::int(0), Expr::int(4)),
                Loop::unit("j", Expr::int(0), Expr::int(4)),
            ],
            lets: vec![],
            body: vec![BodyStmt::Def(Statement {
                guard: None,
                lhs_indices: vec![Expr::var("i")],
                rhs: Expr::var("i"),
                is_update: false,
            })],
        };
        tile(&mut nest, &[Expr::var("j"), Expr::var("jj"), Expr::int(2)]).unwrap();
        remove(&mut nest, &["jj".into(), "j".into()]).unwrap();
        assert_eq!(
            nest.loops
                .iter()
                .map(|l| l.var.as_str())
                .collect::<Vec<_>>(),
            vec!["i"]
        );
        assert!(nest.lets.is_empty());
    }

    #[test]
    fn vectorize_requires_innermost() {
        let mut nest = two_loop_nest();
        let sym = BTreeSet::new();
        let err = vectorize(&mut nest, "i", &sym);
        assert!(matches!(err, Err(ScheduleError::NotInnermost(_))));
        let mut nest = LoopNest {
            func: "F".into(),
            loops: vec![Loop::unit("k", Expr::int(0), Expr::int(4))],
            lets: vec![],
            body: vec![],
        };
        vectorize(&mut nest, "k", &sym).unwrap();
        assert!(nest.loops[0].vectorized);
    }

    #[test]
    fn unroll_marks_and_checks_extent() {
        let mut nest = two_loop_nest();
        let mut sym = BTreeSet::new();
        // I, J are runtime parameters, not symbolic constants: unresolvable.
        assert!(matches!(
            unroll(&mut nest, &["i".into()], &sym),
            Err(ScheduleError::UnresolvableExtent(_))
        ));
        sym.insert("I".to_string());
        sym.insert("J".to_string());
        unroll(&mut nest, &["i".into(), "j".into()], &sym).unwrap();
        assert!(nest.loops[0].unrolled && nest.loops[1].unrolled);
    }
}
