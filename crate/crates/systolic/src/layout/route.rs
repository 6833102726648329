//! Concrete wiring: enumerate every PE's reads and writes under the binding,
//! decide where each element travels, and assemble per-PE execution scripts.
//!
//! All loop bounds and guards are static once the binding is known, so the
//! builder walks each PE's specialized nest offline, matches consumer read
//! instances against producer instances, and materializes exactly the
//! channels that carry traffic. Token payloads are never taken from this
//! analysis; they always flow through the simulated graph.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::LayoutError;
use crate::externs::{Registry, SigParam};
use crate::ir::expr::{eval, Expr, PureContext};
use crate::ir::lower::{BodyStmt, LoopNest};
use crate::ir::Placement;
use crate::value::Binding;

use super::{
    BufSpec, ChainKind, Channel, ChannelKind, ComputeSpec, EmitCopy, Endpoint, ExternArg,
    ExternPorts, FillItem, FillSrc, ForwardRule, Isolation, LhsSpec, MemStoreSpec, Pe, ReadRoute,
    RelayRule, ScheduledProgram, Script, SpatialGraph, Step,
};

// ---------------------------------------------------------------------------
// Nest helpers shared with chain construction
// ---------------------------------------------------------------------------

/// Count read occurrences of `value` in the nest body.
pub fn value_reads_in_nest(nest: &LoopNest, value: &str) -> usize {
    let mut n = 0;
    for_each_value_read(&nest.body, value, &mut |_, _, _| n += 1);
    n
}

/// Visit each read occurrence of `value` in body order: lhs indices first,
/// then the right-hand side, depth first, arguments left to right. The
/// occurrence index is the per-value ordinal used to pair a consumer's reads
/// with the forwards of its isolated producers.
fn for_each_value_read(
    body: &[BodyStmt],
    value: &str,
    f: &mut dyn FnMut(&[Expr], Option<&Expr>, usize),
) {
    let mut occ = 0usize;
    for stmt in body {
        if let BodyStmt::Def(st) = stmt {
            for e in &st.lhs_indices {
                visit_reads(e, value, st.guard.as_ref(), &mut occ, f);
            }
            visit_reads(&st.rhs, value, st.guard.as_ref(), &mut occ, f);
        }
    }
}

fn visit_reads(
    e: &Expr,
    value: &str,
    guard: Option<&Expr>,
    occ: &mut usize,
    f: &mut dyn FnMut(&[Expr], Option<&Expr>, usize),
) {
    match e {
        Expr::ParamRef(n, idx) | Expr::FuncRef(n, idx) => {
            for i in idx {
                visit_reads(i, value, guard, occ, f);
            }
            if n == value {
                f(idx, guard, *occ);
                *occ += 1;
            }
        }
        Expr::Call(_, args) => {
            for a in args {
                visit_reads(a, value, guard, occ, f);
            }
        }
        Expr::Binary(_, a, b) => {
            visit_reads(a, value, guard, occ, f);
            visit_reads(b, value, guard, occ, f);
        }
        Expr::Select(c, a, b) => {
            visit_reads(c, value, guard, occ, f);
            visit_reads(a, value, guard, occ, f);
            visit_reads(b, value, guard, occ, f);
        }
        _ => {}
    }
}

/// Producer-chain body: one forward per read occurrence of the value.
pub fn forward_read_body(nest: &LoopNest, value: &str) -> Vec<BodyStmt> {
    let mut out = Vec::new();
    for_each_value_read(&nest.body, value, &mut |access, guard, occ| {
        out.push(BodyStmt::ForwardRead {
            value: value.to_string(),
            access: access.to_vec(),
            guard: guard.cloned(),
            consumer_slot: occ,
        });
    });
    out
}

/// Consumer-chain body: one forward per element emission. When the function
/// has update definitions only those complete values (the reduction is done
/// in place); otherwise every definition writes its element exactly once.
pub fn forward_write_body(
    _program: &crate::ir::Program,
    nest: &LoopNest,
    _target: &str,
    value: &str,
) -> Vec<BodyStmt> {
    let has_updates = nest
        .body
        .iter()
        .any(|s| matches!(s, BodyStmt::Def(st) if st.is_update));
    let mut out = Vec::new();
    for (idx, stmt) in nest.body.iter().enumerate() {
        if let BodyStmt::Def(st) = stmt {
            if has_updates && !st.is_update {
                continue;
            }
            out.push(BodyStmt::ForwardWrite {
                value: value.to_string(),
                access: st.lhs_indices.clone(),
                guard: if has_updates { None } else { st.guard.clone() },
                producer_stmt: idx,
            });
        }
    }
    out
}

fn static_expr(e: &Expr) -> bool {
    !e.free_var_set().iter().any(|v| v.starts_with("$s"))
}

fn tensor_refs(e: &Expr) -> Vec<String> {
    let mut p = BTreeSet::new();
    let mut f = BTreeSet::new();
    e.referenced_tensors(&mut p, &mut f);
    p.into_iter().chain(f).collect()
}

// ---------------------------------------------------------------------------
// Instance enumeration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum ItemKind {
    Read {
        value: String,
        elem: Option<Vec<i64>>,
        idx_exprs: Vec<Expr>,
        occ: usize,
        slot: usize,
    },
    ExternRead {
        func: String,
        port: usize,
        slot: usize,
    },
    Compute {
        rhs: Expr,
        lhs: LhsSpec,
        is_update: bool,
        stmt: usize,
        write_elem: Option<Vec<i64>>,
    },
    ChainSend {
        value: String,
        elem: Vec<i64>,
        occ: usize,
    },
    ChainRecv {
        value: String,
        elem: Vec<i64>,
    },
}

#[derive(Debug, Clone)]
struct Item {
    kind: ItemKind,
    env: BTreeMap<String, i64>,
    epoch: Vec<i64>,
}

/// Per-statement, per-value read occurrence ids, computed on the function's
/// final (pre-specialization) nest so every copy numbers reads identically.
fn occ_table(nest: &LoopNest) -> Vec<BTreeMap<String, Vec<usize>>> {
    let mut table: Vec<BTreeMap<String, Vec<usize>>> = vec![BTreeMap::new(); nest.body.len()];
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    for (sidx, stmt) in nest.body.iter().enumerate() {
        if let BodyStmt::Def(st) = stmt {
            let mut record = |e: &Expr| {
                collect_value_reads(e, &mut |name| {
                    let c = counters.entry(name.to_string()).or_insert(0);
                    table[sidx].entry(name.to_string()).or_default().push(*c);
                    *c += 1;
                });
            };
            for e in &st.lhs_indices {
                record(e);
            }
            record(&st.rhs);
        }
    }
    table
}

fn collect_value_reads(e: &Expr, f: &mut dyn FnMut(&str)) {
    match e {
        Expr::ParamRef(n, idx) | Expr::FuncRef(n, idx) => {
            for i in idx {
                collect_value_reads(i, f);
            }
            f(n);
        }
        Expr::Call(_, args) => {
            for a in args {
                collect_value_reads(a, f);
            }
        }
        Expr::Binary(_, a, b) => {
            collect_value_reads(a, f);
            collect_value_reads(b, f);
        }
        Expr::Select(c, a, b) => {
            collect_value_reads(c, f);
            collect_value_reads(a, f);
            collect_value_reads(b, f);
        }
        _ => {}
    }
}

/// Substitute unrolled loop values, drop unrolled loops, fold guards, and
/// discard statically dead statements. Returns the specialized nest and the
/// original statement index of each kept statement.
fn specialize(nest: &LoopNest, pe_env: &BTreeMap<String, i64>) -> (LoopNest, Vec<usize>) {
    let subst = |e: &Expr| {
        let mut out = e.clone();
        for (k, v) in pe_env {
            out = out.substitute(k, &Expr::IntConst(*v));
        }
        out.fold()
    };
    let loops = nest
        .loops
        .iter()
        .filter(|l| !l.unrolled)
        .map(|l| {
            let mut l2 = l.clone();
            l2.lo = subst(&l.lo);
            l2.hi = subst(&l.hi);
            l2.step = subst(&l.step);
            l2
        })
        .collect();
    let lets = nest
        .lets
        .iter()
        .map(|(n, e)| (n.clone(), subst(e)))
        .collect();
    let mut body = Vec::new();
    let mut orig = Vec::new();
    for (sidx, stmt) in nest.body.iter().enumerate() {
        let mut s = stmt.clone();
        let guard = match &mut s {
            BodyStmt::Def(st) => {
                for e in st.lhs_indices.iter_mut() {
                    *e = subst(e);
                }
                st.rhs = subst(&st.rhs);
                &mut st.guard
            }
            BodyStmt::ForwardRead { access, guard, .. }
            | BodyStmt::ForwardWrite { access, guard, .. } => {
                for e in access.iter_mut() {
                    *e = subst(e);
                }
                guard
            }
        };
        if let Some(g) = guard {
            let folded = subst(g);
            match folded.as_int() {
                Some(0) => continue,
                Some(_) => *guard = None,
                None => *guard = Some(folded),
            }
        }
        body.push(s);
        orig.push(sidx);
    }
    let mut out = LoopNest {
        func: nest.func.clone(),
        loops,
        lets,
        body,
    };
    out.prune_dead_lets();
    (out, orig)
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum ChanKey {
    RelayHop {
        value: String,
        dir: usize,
        src: usize,
        dst: usize,
    },
    Entry {
        value: String,
        dir: Option<usize>,
        src: usize,
        dst: usize,
    },
    Drain {
        value: String,
        src: usize,
        dst: usize,
    },
    ChainHop {
        value: String,
        src: usize,
        dst: usize,
    },
    ExternArgIn {
        dst: usize,
        port: usize,
    },
    ExternOut {
        src: usize,
        port: usize,
    },
    ExternIn {
        dst: usize,
        group: usize,
        port: usize,
    },
    ParamMem {
        param: String,
        dst: usize,
    },
    HopMem {
        iso: usize,
        hop: usize,
    },
    SinkMem {
        src: usize,
    },
}

#[derive(Debug, Clone)]
enum Entry {
    Direct {
        pe: usize,
    },
    Relay {
        head: usize,
        dest: Vec<i64>,
        dir: usize,
    },
    ExternPort {
        pe: usize,
        port: usize,
    },
}

#[derive(Debug, Clone)]
enum RouteSlot {
    Item { pe: usize, item: usize },
    Fill { pe: usize, fill: usize, idx: usize },
    ExternIn { pe: usize, port: usize },
}

#[derive(Debug, Clone)]
struct Demand {
    elem: Vec<i64>,
    occ: Option<usize>,
    from_fill: bool,
    env: BTreeMap<String, i64>,
    entry: Entry,
    slot: RouteSlot,
}

#[derive(Debug, Clone)]
struct FillRec {
    before_item: usize,
    buf: usize,
    items: Vec<FillItem>,
}

/// A buffer fetch whose upstream source is not yet decided.
#[derive(Debug, Clone)]
struct PendingFetch {
    pe: usize,
    fill: usize,
    idx: usize,
    value: String,
    elem: Vec<i64>,
    env: BTreeMap<String, i64>,
    epoch: Vec<i64>,
    occ: usize,
}

#[derive(Debug, Clone)]
struct ServedRead {
    item: usize,
    elem: Option<Vec<i64>>,
    env: BTreeMap<String, i64>,
    epoch: Vec<i64>,
    occ: usize,
}

struct Builder<'a> {
    sp: &'a ScheduledProgram,
    binding: &'a Binding,
    registry: &'a Registry,
    pes: Vec<Pe>,
    pe_dims: Vec<Vec<String>>,
    pe_id_env: Vec<BTreeMap<String, i64>>,
    func_pes: BTreeMap<String, Vec<usize>>,
    items: Vec<Vec<Item>>,
    /// Per pe/item: the element this instance finally emits, if any.
    emit_elem: Vec<Vec<Option<Vec<i64>>>>,
    /// Per func: element -> (pe, item) of its single emitting instance.
    emissions: BTreeMap<String, BTreeMap<Vec<i64>, (usize, usize)>>,
    /// Per pe: writes by element (for local reads), earliest item first.
    writes_by_elem: Vec<BTreeMap<Vec<i64>, Vec<usize>>>,
    routes: Vec<BTreeMap<usize, ReadRoute>>,
    copies: Vec<BTreeMap<usize, Vec<EmitCopy>>>,
    chan_map: BTreeMap<ChanKey, usize>,
    channels: Vec<Channel>,
    stores: Vec<MemStoreSpec>,
    store_map: BTreeMap<String, usize>,
    chain_demands: BTreeMap<usize, Vec<Demand>>,
    used: Vec<Vec<bool>>,
    active: Vec<Vec<bool>>,
    fills: Vec<Vec<FillRec>>,
    buf_specs: Vec<Vec<BufSpec>>,
    buf_served: Vec<Vec<Vec<ServedRead>>>,
    dyn_flush: Vec<bool>,
    vec_width: BTreeMap<String, usize>,
    /// Extern output ports claimed by consumers: (extern pe, port) -> chan.
    extern_out_ports: BTreeMap<(usize, usize), usize>,
    /// Extern input ports: pe -> port -> chan.
    extern_in_chans: BTreeMap<usize, BTreeMap<usize, usize>>,
    /// Channel groups a def-less extern produces: pe -> iso seq -> port -> chan.
    extern_out_groups: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, usize>>>,
    extern_explicit: BTreeMap<usize, Vec<ExternArg>>,
    extern_sink_port: BTreeMap<usize, usize>,
    claimed_outputs: BTreeMap<usize, usize>,
    /// Consumer-chain forwarding links consumed during matching.
    fwd_used: BTreeMap<(usize, usize), bool>,
}

fn env_compat(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> bool {
    for (k, v) in a {
        if let Some(w) = b.get(k) {
            if v != w {
                return false;
            }
        }
    }
    true
}

impl<'a> Builder<'a> {
    fn eval_i64(&self, e: &Expr, env: &BTreeMap<String, i64>) -> Result<i64, LayoutError> {
        let mut ctx = PureContext {
            env,
            binding: Some(self.binding),
            externs: Some(self.registry),
        };
        eval(e, &mut ctx)
            .map_err(LayoutError::Eval)?
            .as_index()
            .map_err(LayoutError::Eval)
    }

    fn pe_compat(&self, a: usize, b: usize) -> bool {
        let da = &self.pe_dims[a];
        let db = &self.pe_dims[b];
        for (i, v) in da.iter().enumerate() {
            if let Some(j) = db.iter().position(|w| w == v) {
                if self.pes[a].id[i] != self.pes[b].id[j] {
                    return false;
                }
            }
        }
        true
    }

    fn store_for(&mut self, name: &str, prefill: Option<&str>) -> usize {
        if let Some(&id) = self.store_map.get(name) {
            return id;
        }
        let id = self.stores.len();
        self.stores.push(MemStoreSpec {
            name: name.to_string(),
            prefill: prefill.map(|s| s.to_string()),
        });
        self.store_map.insert(name.to_string(), id);
        id
    }

    fn channel(&mut self, key: ChanKey, mk: impl FnOnce(&Self) -> Channel) -> usize {
        if let Some(&id) = self.chan_map.get(&key) {
            return id;
        }
        let ch = mk(self);
        let id = self.channels.len();
        self.channels.push(ch);
        self.chan_map.insert(key, id);
        id
    }

    fn func_vec_width(&self, func: &str) -> usize {
        self.vec_width.get(func).copied().unwrap_or(1)
    }

    fn register_channel(&mut self, key: ChanKey, src: usize, dst: Endpoint, value: &str) -> usize {
        let width = self.func_vec_width(&self.pes[src].func);
        let min_depth = self.min_depth_for(&self.pes[src].func, value, &dst);
        let tagged = !self.pes[src].is_extern;
        self.channel(key, |_| Channel {
            kind: ChannelKind::Register,
            src: Endpoint::Pe(src),
            dst,
            value: value.to_string(),
            depth: None,
            min_depth,
            width,
            tagged,
            store: None,
            dst_port: None,
        })
    }

    fn min_depth_for(&self, src_func: &str, value: &str, dst: &Endpoint) -> usize {
        let dst_func = match dst {
            Endpoint::Pe(i) => self.pes[*i].func.clone(),
            Endpoint::Host(_) => return 1,
        };
        self.sp
            .min_depths
            .iter()
            .filter(|r| r.src_func == src_func && r.value == value && r.dest_func == dst_func)
            .map(|r| r.depth)
            .max()
            .unwrap_or(1)
    }

    // -- PE enumeration ----------------------------------------------------

    fn enumerate_pes(&mut self) -> Result<(), LayoutError> {
        let mut func_names: Vec<String> = self.sp.funcs.keys().cloned().collect();
        // Keep declaration order for stable PE numbering.
        func_names.sort_by_key(|n| {
            self.sp
                .program
                .funcs
                .iter()
                .position(|f| f.name == *n)
                .unwrap_or(usize::MAX)
        });
        for name in func_names {
            let st = &self.sp.funcs[&name];
            let is_extern = self.sp.program.extern_sig(&name).is_some();
            let dims = self.sp.unroll_dims.get(&name).cloned().unwrap_or_default();
            let mut id_envs: Vec<BTreeMap<String, i64>> = Vec::new();
            if dims.is_empty() {
                id_envs.push(BTreeMap::new());
            } else {
                let nest = st.nest.as_ref().ok_or_else(|| {
                    LayoutError::InconsistentWiring(format!(
                        "`{name}` unrolls loops but has no loop nest"
                    ))
                })?;
                let unrolled: Vec<&crate::ir::lower::Loop> =
                    nest.loops.iter().filter(|l| l.unrolled).collect();
                fn rec(
                    b: &Builder,
                    loops: &[&crate::ir::lower::Loop],
                    d: usize,
                    env: &mut BTreeMap<String, i64>,
                    out: &mut Vec<BTreeMap<String, i64>>,
                ) -> Result<(), LayoutError> {
                    if d == loops.len() {
                        out.push(env.clone());
                        return Ok(());
                    }
                    let l = loops[d];
                    let lo = b.eval_i64(&l.lo, env)?;
                    let hi = b.eval_i64(&l.hi, env)?;
                    let step = b.eval_i64(&l.step, env)?;
                    if step <= 0 {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "unrolled loop {} has non-positive step",
                            l.var
                        )));
                    }
                    let mut v = lo;
                    while v < hi {
                        env.insert(l.var.clone(), v);
                        rec(b, loops, d + 1, env, out)?;
                        v += step;
                    }
                    env.remove(&l.var);
                    Ok(())
                }
                let mut env = BTreeMap::new();
                rec(self, &unrolled, 0, &mut env, &mut id_envs)?;
                if id_envs.is_empty() {
                    return Err(LayoutError::InconsistentWiring(format!(
                        "unrolling `{name}` produces zero PEs"
                    )));
                }
            }
            // Ordinal positions: rank of each value within its dimension's
            // observed value set.
            let mut dim_values: Vec<BTreeSet<i64>> = vec![BTreeSet::new(); dims.len()];
            for env in &id_envs {
                for (d, var) in dims.iter().enumerate() {
                    dim_values[d].insert(env[var]);
                }
            }
            let mut pe_ids = Vec::new();
            for env in &id_envs {
                let id: Vec<i64> = dims.iter().map(|v| env[v]).collect();
                let pos: Vec<i64> = dims
                    .iter()
                    .enumerate()
                    .map(|(d, v)| dim_values[d].iter().position(|&x| x == env[v]).unwrap() as i64)
                    .collect();
                let nest = st.nest.as_ref().map(|n| specialize(n, env));
                let idx = self.pes.len();
                self.pes.push(Pe {
                    func: name.clone(),
                    id,
                    pos,
                    placement: st.placement,
                    is_extern,
                    nest: nest.as_ref().map(|(n, _)| n.clone()),
                });
                self.pe_dims.push(dims.clone());
                self.pe_id_env.push(env.clone());
                self.items.push(Vec::new());
                self.emit_elem.push(Vec::new());
                self.writes_by_elem.push(BTreeMap::new());
                self.routes.push(BTreeMap::new());
                self.copies.push(BTreeMap::new());
                self.used.push(Vec::new());
                self.active.push(Vec::new());
                self.fills.push(Vec::new());
                self.buf_specs.push(Vec::new());
                self.buf_served.push(Vec::new());
                self.dyn_flush.push(false);
                pe_ids.push(idx);
            }
            self.func_pes.insert(name.clone(), pe_ids);
            // Record vector width from a vectorized innermost loop.
            if let Some(nest) = &st.nest {
                if let Some(l) = nest.loops.last() {
                    if l.vectorized {
                        let mut env = BTreeMap::new();
                        let lo = self.eval_i64(&l.lo, &env)?;
                        env.clear();
                        let hi = self.eval_i64(&l.hi, &env)?;
                        let w = (hi - lo).max(1) as usize;
                        self.vec_width.insert(name.clone(), w);
                    }
                }
            }
        }
        Ok(())
    }

    // -- Item enumeration ---------------------------------------------------

    fn enumerate_items(&mut self) -> Result<(), LayoutError> {
        for pe_idx in 0..self.pes.len() {
            let pe = self.pes[pe_idx].clone();
            if pe.is_extern {
                continue;
            }
            let Some(spec_nest) = pe.nest.clone() else {
                continue;
            };
            let st = &self.sp.funcs[&pe.func];
            let full_nest = st.nest.as_ref().unwrap();
            let (_, orig_map) = specialize(full_nest, &self.pe_id_env[pe_idx]);
            let occs = occ_table(full_nest);
            // Epoch variables: retained loops outer to the first unrolled one.
            let mut epoch_vars = Vec::new();
            for l in &full_nest.loops {
                if l.unrolled {
                    break;
                }
                epoch_vars.push(l.var.clone());
            }
            let mut w = ItemWalker {
                b: self,
                pe: pe_idx,
                nest: &spec_nest,
                orig_stmt: &orig_map,
                occ_table: &occs,
                epoch_vars: &epoch_vars,
                items: Vec::new(),
                slots: 0,
            };
            let mut env = BTreeMap::new();
            w.walk(0, &mut env)?;
            let items = std::mem::take(&mut w.items);
            self.items[pe_idx] = items;
            self.emit_elem[pe_idx] = vec![None; self.items[pe_idx].len()];
            self.used[pe_idx] = vec![false; self.items[pe_idx].len()];
            self.active[pe_idx] = vec![false; self.items[pe_idx].len()];
        }
        Ok(())
    }

    // -- Emission analysis ---------------------------------------------------

    fn emission_analysis(&mut self) {
        for (func, pes) in self.func_pes.clone() {
            // An element completes at its last write instance, whichever
            // statement performs it: reductions emit when the reduction is
            // done, pure writes emit where they happen.
            let mut emap: BTreeMap<Vec<i64>, (usize, usize)> = BTreeMap::new();
            for &pe in &pes {
                for (i, item) in self.items[pe].iter().enumerate() {
                    if let ItemKind::Compute {
                        write_elem: Some(elem),
                        ..
                    } = &item.kind
                    {
                        self.writes_by_elem[pe]
                            .entry(elem.clone())
                            .or_default()
                            .push(i);
                        emap.insert(elem.clone(), (pe, i));
                    }
                    if let ItemKind::Compute {
                        write_elem: None, ..
                    } = &item.kind
                    {
                        self.dyn_flush[pe] = true;
                    }
                }
            }
            for (elem, (pe, i)) in &emap {
                self.emit_elem[*pe][*i] = Some(elem.clone());
            }
            self.emissions.insert(func, emap);
        }
    }

    // -- Read resolution ------------------------------------------------------

    fn is_chain_func(&self, func: &str) -> bool {
        self.sp.funcs[func].chain_of.is_some()
    }

    fn buffers_for(&self, func: &str, value: &str) -> Vec<super::BufferRule> {
        let mut rules: Vec<super::BufferRule> = self.sp.funcs[func]
            .buffers
            .iter()
            .filter(|b| b.value == value)
            .cloned()
            .collect();
        // Order outermost first: level None, then by loop position.
        let nest = self.sp.funcs[func].nest.as_ref();
        rules.sort_by_key(|b| match (&b.level, nest) {
            (None, _) => -1i64,
            (Some(l), Some(n)) => n.loop_index(l).map(|i| i as i64).unwrap_or(i64::MAX),
            (Some(_), None) => i64::MAX,
        });
        rules
    }

    /// Ensure BufSpecs exist on this PE for the value; returns buffer ids
    /// outermost-first.
    fn pe_buffers(&mut self, pe: usize, func: &str, value: &str) -> Vec<usize> {
        let existing: Vec<usize> = self.buf_specs[pe]
            .iter()
            .enumerate()
            .filter(|(_, b)| b.value == value)
            .map(|(i, _)| i)
            .collect();
        if !existing.is_empty() {
            return existing;
        }
        let rules = self.buffers_for(func, value);
        let mut ids = Vec::new();
        for r in rules {
            let id = self.buf_specs[pe].len();
            self.buf_specs[pe].push(BufSpec {
                value: value.to_string(),
                level: r.level.clone(),
                line: r.line,
                attrs: r.attrs.clone(),
            });
            self.buf_served[pe].push(Vec::new());
            ids.push(id);
        }
        ids
    }

    fn resolve_regular_reads(&mut self) -> Result<(), LayoutError> {
        let pe_count = self.pes.len();
        for pe in 0..pe_count {
            let func = self.pes[pe].func.clone();
            if self.pes[pe].is_extern || self.is_chain_func(&func) {
                continue;
            }
            let items = self.items[pe].clone();
            for (idx, item) in items.iter().enumerate() {
                match &item.kind {
                    ItemKind::Read {
                        value, elem, occ, ..
                    } => {
                        self.resolve_one_read(pe, idx, &func, value, elem.clone(), *occ, item)?;
                    }
                    ItemKind::ExternRead {
                        func: ext, port, ..
                    } => {
                        let chan = self.extern_out_channel(ext, *port, pe)?;
                        self.routes[pe].insert(idx, ReadRoute::ChanStream { chan });
                    }
                    _ => {}
                }
            }
            let pending = self.compute_fills(pe, &func)?;
            for p in pending {
                let route = self.route_upstream(
                    p.pe,
                    &func,
                    &p.value,
                    p.elem.clone(),
                    &p.env,
                    &p.epoch,
                    p.occ,
                    RouteSlot::Fill {
                        pe: p.pe,
                        fill: p.fill,
                        idx: p.idx,
                    },
                )?;
                if let Some(r) = route {
                    self.patch_fill(p.pe, p.fill, p.idx, &r)?;
                }
            }
        }
        Ok(())
    }

    fn patch_fill(
        &mut self,
        pe: usize,
        fill: usize,
        idx: usize,
        route: &ReadRoute,
    ) -> Result<(), LayoutError> {
        let src = match route {
            ReadRoute::ChanKeyed { chan, .. } | ReadRoute::ChanStream { chan } => {
                FillSrc::ChanKeyed { chan: *chan }
            }
            ReadRoute::Mem { store, chan, .. } => FillSrc::Mem {
                store: *store,
                chan: chan.unwrap_or(usize::MAX),
            },
            other => {
                return Err(LayoutError::InconsistentWiring(format!(
                    "unsupported buffer fetch route {other:?}"
                )))
            }
        };
        self.fills[pe][fill].items[idx].src = src;
        Ok(())
    }

    fn extern_out_channel(
        &mut self,
        ext_func: &str,
        port: usize,
        consumer_pe: usize,
    ) -> Result<usize, LayoutError> {
        let pes = self.func_pes.get(ext_func).cloned().unwrap_or_default();
        let &ext_pe = pes.first().ok_or_else(|| {
            LayoutError::InconsistentWiring(format!("extern `{ext_func}` has no PE"))
        })?;
        let key = ChanKey::ExternOut { src: ext_pe, port };
        if let Some(&c) = self.chan_map.get(&key) {
            if self.channels[c].dst != Endpoint::Pe(consumer_pe) {
                return Err(LayoutError::InconsistentWiring(format!(
                    "output slot {port} of `{ext_func}` is consumed twice"
                )));
            }
            return Ok(c);
        }
        let c = self.channel(key, |_| Channel {
            kind: ChannelKind::Register,
            src: Endpoint::Pe(ext_pe),
            dst: Endpoint::Pe(consumer_pe),
            value: ext_func.to_string(),
            depth: None,
            min_depth: 1,
            width: 1,
            tagged: false,
            store: None,
            dst_port: None,
        });
        self.extern_out_ports.insert((ext_pe, port), c);
        Ok(c)
    }

    #[allow(clippy::too_many_arguments)]
    fn resolve_one_read(
        &mut self,
        pe: usize,
        idx: usize,
        func: &str,
        value: &str,
        elem: Option<Vec<i64>>,
        occ: usize,
        item: &Item,
    ) -> Result<(), LayoutError> {
        // Dynamic index: must be served by a buffer.
        let Some(elem) = elem else {
            let bufs = self.pe_buffers(pe, func, value);
            let Some(&buf) = bufs.last() else {
                return Err(LayoutError::UnboundedFootprint {
                    func: func.to_string(),
                    value: value.to_string(),
                });
            };
            let idx_exprs = match &self.items[pe][idx].kind {
                ItemKind::Read { idx_exprs, .. } => idx_exprs.clone(),
                _ => unreachable!(),
            };
            self.buf_served[pe][buf].push(ServedRead {
                item: idx,
                elem: None,
                env: item.env.clone(),
                epoch: item.epoch.clone(),
                occ,
            });
            let env_vec: Vec<(String, i64)> =
                item.env.iter().map(|(k, v)| (k.clone(), *v)).collect();
            self.routes[pe].insert(
                idx,
                ReadRoute::BufferDyn {
                    buf,
                    idx: idx_exprs,
                    env: env_vec,
                },
            );
            return Ok(());
        };

        // Own value: local or neighbor relay first.
        if value == func {
            if let Some(writers) = self.writes_by_elem[pe].get(&elem) {
                if writers.iter().any(|&w| w < idx) {
                    self.routes[pe].insert(idx, ReadRoute::Local { elem });
                    return Ok(());
                }
            }
            let (wpe, witem) = *self
                .emissions
                .get(func)
                .and_then(|m| m.get(&elem))
                .ok_or_else(|| {
                    LayoutError::InconsistentWiring(format!(
                        "`{func}` reads {value}{elem:?} which is never produced"
                    ))
                })?;
            let same_epoch = self.items[wpe][witem].epoch == item.epoch;
            if same_epoch {
                let (in_chan, first_hop, dest) =
                    self.relay_path(func, value, wpe, pe).ok_or_else(|| {
                        LayoutError::InconsistentWiring(format!(
                            "`{func}` reads {value}{elem:?} from {} in the same epoch, \
                             but no declared relay direction delivers it",
                            self.pes[wpe].label()
                        ))
                    })?;
                self.copies[wpe]
                    .entry(witem)
                    .or_default()
                    .push(EmitCopy::Chan {
                        chan: first_hop,
                        dest: Some(dest),
                    });
                self.routes[pe].insert(
                    idx,
                    ReadRoute::ChanKeyed {
                        chan: in_chan,
                        elem,
                    },
                );
                return Ok(());
            }
            // Cross-epoch: goes out to the isolated consumer and comes back
            // from the isolated producer, staged through a buffer when one is
            // declared for the value.
            if self.sp.producer_chain(func, value).is_none() {
                return Err(LayoutError::InconsistentWiring(format!(
                    "`{func}` reads its own {elem:?} across epochs but has no isolated producer"
                )));
            }
            if self.sp.consumer_chain(func).is_none() {
                return Err(LayoutError::InconsistentWiring(format!(
                    "`{func}` feeds values back across epochs but has no isolated consumer"
                )));
            }
            if !self.buffers_for(func, value).is_empty() {
                let bufs = self.pe_buffers(pe, func, value);
                let buf = *bufs.last().unwrap();
                self.buf_served[pe][buf].push(ServedRead {
                    item: idx,
                    elem: Some(elem.clone()),
                    env: item.env.clone(),
                    epoch: item.epoch.clone(),
                    occ,
                });
                self.routes[pe].insert(idx, ReadRoute::Buffer { buf, elem });
                return Ok(());
            }
            let iso = self.sp.producer_chain(func, value).unwrap().clone();
            let entry = self.entry_for(pe, func, value);
            self.chain_demands.entry(iso.seq).or_default().push(Demand {
                elem,
                occ: Some(occ),
                from_fill: false,
                env: item.env.clone(),
                entry,
                slot: RouteSlot::Item { pe, item: idx },
            });
            return Ok(());
        }

        // Buffered reads defer to the fill machinery.
        if !self.buffers_for(func, value).is_empty() {
            let bufs = self.pe_buffers(pe, func, value);
            let buf = *bufs.last().unwrap();
            self.buf_served[pe][buf].push(ServedRead {
                item: idx,
                elem: Some(elem.clone()),
                env: item.env.clone(),
                epoch: item.epoch.clone(),
                occ,
            });
            self.routes[pe].insert(idx, ReadRoute::Buffer { buf, elem });
            return Ok(());
        }

        let route = self.route_upstream(
            pe,
            func,
            value,
            elem,
            &item.env,
            &item.epoch,
            occ,
            RouteSlot::Item { pe, item: idx },
        )?;
        if let Some(r) = route {
            self.routes[pe].insert(idx, r);
        }
        Ok(())
    }

    /// Route a read (or buffer fetch) of a non-self value from its source.
    /// Returns None when the route is deferred to chain matching.
    #[allow(clippy::too_many_arguments)]
    fn route_upstream(
        &mut self,
        pe: usize,
        func: &str,
        value: &str,
        elem: Vec<i64>,
        env: &BTreeMap<String, i64>,
        epoch: &[i64],
        occ: usize,
        slot: RouteSlot,
    ) -> Result<Option<ReadRoute>, LayoutError> {
        let _ = epoch;
        if value == func {
            // Self-value fetch from a fill: cross-epoch by construction.
            let iso = self
                .sp
                .producer_chain(func, value)
                .ok_or_else(|| {
                    LayoutError::InconsistentWiring(format!(
                        "`{func}` buffers its own {elem:?} but has no isolated producer"
                    ))
                })?
                .clone();
            let entry = self.entry_for(pe, func, value);
            self.chain_demands.entry(iso.seq).or_default().push(Demand {
                elem,
                occ: Some(occ),
                from_fill: matches!(slot, RouteSlot::Fill { .. }),
                env: env.clone(),
                entry,
                slot,
            });
            return Ok(None);
        }
        if self.sp.program.param(value).is_some() {
            if let Some(iso) = self.sp.producer_chain(func, value).cloned() {
                // Extern-implemented chain tails stream positionally.
                let tail = iso.chain.last().unwrap().clone();
                if self.sp.program.extern_sig(&tail).is_some() {
                    let port = self.extern_group_port(&iso, &elem)?;
                    let chan = self.extern_group_channel(&iso, &tail, port, pe)?;
                    return Ok(Some(ReadRoute::ChanStream { chan }));
                }
                let entry = self.entry_for(pe, func, value);
                self.chain_demands.entry(iso.seq).or_default().push(Demand {
                    elem,
                    occ: Some(occ),
                    from_fill: matches!(slot, RouteSlot::Fill { .. }),
                    env: env.clone(),
                    entry,
                    slot,
                });
                return Ok(None);
            }
            // No isolated producer: an implicit memory channel from the host.
            // Host PEs read host memory directly, without a channel.
            let store = self.store_for(&format!("param:{value}"), Some(value));
            let chan = if self.pes[pe].placement == Placement::Device {
                Some(self.channel(
                    ChanKey::ParamMem {
                        param: value.to_string(),
                        dst: pe,
                    },
                    |b| Channel {
                        kind: ChannelKind::Memory,
                        src: Endpoint::Host(value.to_string()),
                        dst: Endpoint::Pe(pe),
                        value: value.to_string(),
                        depth: None,
                        min_depth: 1,
                        width: b.func_vec_width(func),
                        tagged: false,
                        store: Some(store),
                        dst_port: None,
                    },
                ))
            } else {
                None
            };
            return Ok(Some(ReadRoute::Mem { store, elem, chan }));
        }
        // Another function's value: direct from its writer, through this
        // function's relay chains when declared.
        let (wpe, witem) = *self
            .emissions
            .get(value)
            .and_then(|m| m.get(&elem))
            .ok_or_else(|| {
                LayoutError::InconsistentWiring(format!(
                    "`{func}` reads {value}{elem:?} which is never produced"
                ))
            })?;
        if self.sp.relay_for(func, value).is_some() {
            let entry = self.entry_for(pe, func, value);
            let (in_chan, first_hop, dest) = self.wire_entry(wpe, &entry, value)?;
            self.copies[wpe]
                .entry(witem)
                .or_default()
                .push(EmitCopy::Chan {
                    chan: first_hop,
                    dest,
                });
            return Ok(Some(ReadRoute::ChanKeyed {
                chan: in_chan,
                elem,
            }));
        }
        let chan = self.channel(
            ChanKey::Entry {
                value: value.to_string(),
                dir: None,
                src: wpe,
                dst: pe,
            },
            |b| Channel {
                kind: ChannelKind::Register,
                src: Endpoint::Pe(wpe),
                dst: Endpoint::Pe(pe),
                value: value.to_string(),
                depth: None,
                min_depth: b.min_depth_for(value, value, &Endpoint::Pe(pe)),
                width: b.func_vec_width(value),
                tagged: true,
                store: None,
                dst_port: None,
            },
        );
        self.copies[wpe]
            .entry(witem)
            .or_default()
            .push(EmitCopy::Chan {
                chan,
                dest: Some(self.pes[pe].pos.clone()),
            });
        Ok(Some(ReadRoute::ChanKeyed { chan, elem }))
    }

    /// The slot index an extern channel array uses for an element: its last
    /// coordinate (the slot-major layout of the preprocessed matrices).
    fn extern_group_port(&self, iso: &Isolation, elem: &[i64]) -> Result<usize, LayoutError> {
        let last = *elem.last().ok_or_else(|| {
            LayoutError::InconsistentWiring(format!(
                "scalar value `{}` cannot flow through a channel array",
                iso.value
            ))
        })?;
        if last < 0 {
            return Err(LayoutError::InconsistentWiring(format!(
                "negative slot index {last} for `{}`",
                iso.value
            )));
        }
        Ok(last as usize)
    }

    fn extern_group_channel(
        &mut self,
        iso: &Isolation,
        tail: &str,
        port: usize,
        consumer_pe: usize,
    ) -> Result<usize, LayoutError> {
        let pes = self.func_pes.get(tail).cloned().unwrap_or_default();
        let &src = pes
            .first()
            .ok_or_else(|| LayoutError::InconsistentWiring(format!("extern `{tail}` has no PE")))?;
        let key = ChanKey::ExternIn {
            dst: consumer_pe,
            group: iso.seq,
            port,
        };
        if let Some(&c) = self.chan_map.get(&key) {
            return Ok(c);
        }
        let value = iso.value.clone();
        let c = self.channel(key, |_| Channel {
            kind: ChannelKind::Register,
            src: Endpoint::Pe(src),
            dst: Endpoint::Pe(consumer_pe),
            value: value.clone(),
            depth: None,
            min_depth: 1,
            width: 1,
            tagged: false,
            store: None,
            dst_port: None,
        });
        let group = self.extern_out_groups.entry(src).or_default();
        let ports = group.entry(iso.seq).or_default();
        if ports.insert(port, c).is_some() {
            return Err(LayoutError::InconsistentWiring(format!(
                "slot {port} of `{}` from `{tail}` is consumed by more than one PE",
                iso.value
            )));
        }
        Ok(c)
    }

    /// Entry point for tokens of `value` bound for PE `pe`: the head of its
    /// relay chain, preferring a direction in which the PE is itself the head.
    fn entry_for(&self, pe: usize, func: &str, value: &str) -> Entry {
        let st = &self.sp.funcs[func];
        let rules: Vec<(usize, &RelayRule)> = st
            .relays
            .iter()
            .enumerate()
            .filter(|(_, r)| r.value == value)
            .collect();
        if rules.is_empty() {
            return Entry::Direct { pe };
        }
        let fpes = &self.func_pes[func];
        let find_pe = |pos: &[i64]| fpes.iter().copied().find(|&q| self.pes[q].pos == pos);
        // Prefer a direction where the PE is the chain head.
        for (ridx, r) in &rules {
            if let Some(d) = self.const_dir(func, pe, r) {
                let back: Vec<i64> = self.pes[pe]
                    .pos
                    .iter()
                    .zip(&d)
                    .map(|(p, dd)| p - dd)
                    .collect();
                if find_pe(&back).is_none() {
                    return Entry::Relay {
                        head: pe,
                        dest: self.pes[pe].pos.clone(),
                        dir: *ridx,
                    };
                }
            }
        }
        let (ridx, r) = rules[0];
        if let Some(d) = self.const_dir(func, pe, r) {
            let mut head = pe;
            loop {
                let back: Vec<i64> = self.pes[head]
                    .pos
                    .iter()
                    .zip(&d)
                    .map(|(p, dd)| p - dd)
                    .collect();
                match find_pe(&back) {
                    Some(prev) => head = prev,
                    None => break,
                }
            }
            return Entry::Relay {
                head,
                dest: self.pes[pe].pos.clone(),
                dir: ridx,
            };
        }
        Entry::Direct { pe }
    }

    /// Evaluate a relay direction at a PE; None if non-constant per PE is
    /// fine, evaluated with the PE's unrolled values.
    fn const_dir(&self, func: &str, pe: usize, r: &RelayRule) -> Option<Vec<i64>> {
        let fpes = &self.func_pes[func];
        let &first = fpes.first()?;
        let _ = first;
        let env = self.pe_id_env[pe].clone();
        let mut out = Vec::new();
        for e in &r.direction {
            let v = self.eval_i64(e, &env).ok()?;
            out.push(v);
        }
        Some(out)
    }

    /// Channels for delivering to `entry` from producer PE `src`.
    /// Returns (consumer-side in-channel, producer-side first hop, dest tag).
    fn wire_entry(
        &mut self,
        src: usize,
        entry: &Entry,
        value: &str,
    ) -> Result<(usize, usize, Option<Vec<i64>>), LayoutError> {
        match entry {
            Entry::Direct { pe } => {
                if !self.pe_compat(src, *pe) {
                    return Err(LayoutError::InconsistentWiring(format!(
                        "{} cannot feed {}: shared unrolled loops disagree",
                        self.pes[src].label(),
                        self.pes[*pe].label()
                    )));
                }
                let c = self.register_channel(
                    ChanKey::ChainHop {
                        value: value.to_string(),
                        src,
                        dst: *pe,
                    },
                    src,
                    Endpoint::Pe(*pe),
                    value,
                );
                Ok((c, c, Some(self.pes[*pe].pos.clone())))
            }
            Entry::ExternPort { pe, port } => {
                let key = ChanKey::ExternArgIn {
                    dst: *pe,
                    port: *port,
                };
                if let Some(&c) = self.chan_map.get(&key) {
                    return Ok((c, c, None));
                }
                let c = self.register_channel(key, src, Endpoint::Pe(*pe), value);
                self.channels[c].dst_port = Some(*port);
                Ok((c, c, None))
            }
            Entry::Relay { head, dest, dir } => {
                if !self.pe_compat(src, *head) {
                    return Err(LayoutError::InconsistentWiring(format!(
                        "{} cannot feed relay head {}: shared unrolled loops disagree",
                        self.pes[src].label(),
                        self.pes[*head].label()
                    )));
                }
                let entry_chan = self.register_channel(
                    ChanKey::Entry {
                        value: value.to_string(),
                        dir: Some(*dir),
                        src,
                        dst: *head,
                    },
                    src,
                    Endpoint::Pe(*head),
                    value,
                );
                // Hop channels along the path head -> dest.
                let func = self.pes[*head].func.clone();
                let rule = self.sp.funcs[&func].relays[*dir].clone();
                let mut cur = *head;
                let mut in_chan = entry_chan;
                while self.pes[cur].pos != *dest {
                    let d = self.const_dir(&func, cur, &rule).ok_or_else(|| {
                        LayoutError::InconsistentWiring(
                            "non-constant relay direction on a multi-hop path".to_string(),
                        )
                    })?;
                    let next_pos: Vec<i64> = self.pes[cur]
                        .pos
                        .iter()
                        .zip(&d)
                        .map(|(p, dd)| p + dd)
                        .collect();
                    let next = self.func_pes[&func]
                        .iter()
                        .copied()
                        .find(|&q| self.pes[q].pos == next_pos)
                        .ok_or_else(|| {
                            LayoutError::InconsistentWiring(format!(
                                "relay path for {value} leaves the array before reaching {dest:?}"
                            ))
                        })?;
                    let hop = self.register_channel(
                        ChanKey::RelayHop {
                            value: value.to_string(),
                            dir: *dir,
                            src: cur,
                            dst: next,
                        },
                        cur,
                        Endpoint::Pe(next),
                        value,
                    );
                    in_chan = hop;
                    cur = next;
                }
                Ok((in_chan, entry_chan, Some(dest.clone())))
            }
        }
    }

    /// Same-epoch neighbor delivery: writer `wpe` sends along a declared
    /// direction so the token reaches `rpe` after k >= 1 hops.
    fn relay_path(
        &mut self,
        func: &str,
        value: &str,
        wpe: usize,
        rpe: usize,
    ) -> Option<(usize, usize, Vec<i64>)> {
        let rules: Vec<(usize, RelayRule)> = self.sp.funcs[func]
            .relays
            .iter()
            .enumerate()
            .filter(|(_, r)| r.value == value)
            .map(|(i, r)| (i, r.clone()))
            .collect();
        for (ridx, rule) in &rules {
            let Some(d) = self.const_dir(func, wpe, rule) else {
                continue;
            };
            if d.iter().all(|&x| x == 0) {
                continue;
            }
            let delta: Vec<i64> = self.pes[rpe]
                .pos
                .iter()
                .zip(&self.pes[wpe].pos)
                .map(|(a, b)| a - b)
                .collect();
            // delta must be k*d for integer k >= 1.
            let mut k: Option<i64> = None;
            let mut ok = true;
            for (dl, dd) in delta.iter().zip(&d) {
                if *dd == 0 {
                    if *dl != 0 {
                        ok = false;
                        break;
                    }
                } else {
                    if dl % dd != 0 {
                        ok = false;
                        break;
                    }
                    let kk = dl / dd;
                    match k {
                        None => k = Some(kk),
                        Some(prev) if prev != kk => {
                            ok = false;
                            break;
                        }
                        _ => {}
                    }
                }
            }
            let Some(k) = k else { continue };
            if !ok || k < 1 {
                continue;
            }
            // The whole path must exist before any hop channel is created,
            // so a direction blocked mid-way falls through to the next one.
            let func_pes = self.func_pes[func].clone();
            let mut path = vec![wpe];
            let mut cur = wpe;
            let mut complete = true;
            for _ in 0..k {
                let next_pos: Vec<i64> = self.pes[cur]
                    .pos
                    .iter()
                    .zip(&d)
                    .map(|(p, dd)| p + dd)
                    .collect();
                match func_pes.iter().copied().find(|&q| self.pes[q].pos == next_pos) {
                    Some(next) => {
                        path.push(next);
                        cur = next;
                    }
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if !complete || cur != rpe {
                continue;
            }
            let mut in_chan = None;
            let mut first = None;
            for hop_pair in path.windows(2) {
                let hop = self.register_channel(
                    ChanKey::RelayHop {
                        value: value.to_string(),
                        dir: *ridx,
                        src: hop_pair[0],
                        dst: hop_pair[1],
                    },
                    hop_pair[0],
                    Endpoint::Pe(hop_pair[1]),
                    value,
                );
                if first.is_none() {
                    first = Some(hop);
                }
                in_chan = Some(hop);
            }
            return Some((in_chan?, first?, self.pes[rpe].pos.clone()));
        }
        None
    }

    // -- Buffer fills ----------------------------------------------------------

    /// Compute buffer fills for one PE. Fetches that must come from upstream
    /// are returned for the caller to route (regular functions go through
    /// `route_upstream`; chain functions route to the previous chain hop).
    fn compute_fills(&mut self, pe: usize, func: &str) -> Result<Vec<PendingFetch>, LayoutError> {
        let mut pending = Vec::new();
        // Values with buffers on this PE, innermost buffer id first per value.
        let values: BTreeSet<String> = self.buf_specs[pe].iter().map(|b| b.value.clone()).collect();
        for value in values {
            let bufs: Vec<usize> = self.buf_specs[pe]
                .iter()
                .enumerate()
                .filter(|(_, b)| b.value == value)
                .map(|(i, _)| i)
                .collect();
            // Process innermost (deepest) first: it is the last id (rules are
            // recorded outermost-first).
            for pos in (0..bufs.len()).rev() {
                let buf = bufs[pos];
                let parent = if pos > 0 { Some(bufs[pos - 1]) } else { None };
                self.fill_one_buffer(pe, func, &value, buf, parent, &mut pending)?;
            }
        }
        Ok(pending)
    }

    fn buffer_outer_vars(&self, func: &str, level: &Option<String>) -> Vec<String> {
        let nest = self.sp.funcs[func].nest.as_ref().unwrap();
        match level {
            None => Vec::new(),
            Some(l) => {
                let idx = nest.loop_index(l).unwrap_or(0);
                nest.loops[..=idx]
                    .iter()
                    .filter(|lp| !lp.unrolled)
                    .map(|lp| lp.var.clone())
                    .collect()
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn fill_one_buffer(
        &mut self,
        pe: usize,
        func: &str,
        value: &str,
        buf: usize,
        parent: Option<usize>,
        pending: &mut Vec<PendingFetch>,
    ) -> Result<(), LayoutError> {
        let mut served = std::mem::take(&mut self.buf_served[pe][buf]);
        if served.is_empty() {
            return Ok(());
        }
        // Reads may have been registered in demand-match order; fills follow
        // the PE's walk order.
        served.sort_by_key(|s| s.item);
        let spec = self.buf_specs[pe][buf].clone();
        let outer = self.buffer_outer_vars(func, &spec.level);
        let has_dynamic = served.iter().any(|s| s.elem.is_none());
        if has_dynamic && (spec.level.is_some() || self.sp.program.param(value).is_none()) {
            return Err(LayoutError::UnboundedFootprint {
                func: func.to_string(),
                value: value.to_string(),
            });
        }
        // Group served reads by fill key in first-occurrence order.
        let mut groups: Vec<(Vec<i64>, Vec<&ServedRead>)> = Vec::new();
        for s in &served {
            let key: Vec<i64> = outer
                .iter()
                .map(|v| s.env.get(v).copied().unwrap_or(0))
                .collect();
            match groups.last_mut() {
                Some((k, g)) if *k == key => g.push(s),
                _ => groups.push((key, vec![s])),
            }
        }
        // Demands carry the fill-point environment: the loops outside the
        // buffer level plus this PE's fixed unrolled values. Inner-loop
        // positions of the first read must not over-constrain the match.
        let fill_env_of = |env: &BTreeMap<String, i64>| -> BTreeMap<String, i64> {
            let mut out: BTreeMap<String, i64> = outer
                .iter()
                .filter_map(|v| env.get(v).map(|x| (v.clone(), *x)))
                .collect();
            for (k, v) in &self.pe_id_env[pe] {
                out.insert(k.clone(), *v);
            }
            out
        };
        let mut contents: BTreeSet<Vec<i64>> = BTreeSet::new();
        let mut overlaps = Vec::new();
        let mut prev_needed: Option<BTreeSet<Vec<i64>>> = None;
        for (_, group) in &groups {
            let first_item = group.iter().map(|s| s.item).min().unwrap();
            let mut needed: Vec<Vec<i64>> = Vec::new();
            let mut seen = BTreeSet::new();
            if has_dynamic {
                let t =
                    self.binding
                        .tensor(value)
                        .ok_or_else(|| LayoutError::UnboundedFootprint {
                            func: func.to_string(),
                            value: value.to_string(),
                        })?;
                let mut all = Vec::new();
                expand_stream_all(t, &mut all);
                for e in all {
                    if seen.insert(e.clone()) {
                        needed.push(e);
                    }
                }
            } else {
                for s in group.iter() {
                    let e = s.elem.clone().unwrap();
                    if seen.insert(e.clone()) {
                        needed.push(e);
                    }
                }
            }
            if let Some(prev) = &prev_needed {
                overlaps.push(seen.intersection(prev).count());
            }
            prev_needed = Some(seen.clone());
            let mut fill_items = Vec::new();
            for e in needed {
                if contents.contains(&e) {
                    continue;
                }
                contents.insert(e.clone());
                let src = match parent {
                    Some(p) => {
                        // The parent buffer serves this fetch; register it as
                        // a served read on the parent at the same position.
                        self.buf_served[pe][p].push(ServedRead {
                            item: first_item,
                            elem: Some(e.clone()),
                            env: fill_env_of(&group[0].env),
                            epoch: group[0].epoch.clone(),
                            occ: group[0].occ,
                        });
                        FillSrc::Parent { buf: p }
                    }
                    None => {
                        pending.push(PendingFetch {
                            pe,
                            fill: self.fills[pe].len(),
                            idx: fill_items.len(),
                            value: value.to_string(),
                            elem: e.clone(),
                            env: fill_env_of(&group[0].env),
                            epoch: group[0].epoch.clone(),
                            occ: group[0].occ,
                        });
                        // Placeholder patched when the fetch is routed.
                        FillSrc::ChanKeyed { chan: usize::MAX }
                    }
                };
                fill_items.push(FillItem { elem: e, src });
            }
            if !fill_items.is_empty() {
                self.fills[pe].push(FillRec {
                    before_item: first_item,
                    buf,
                    items: fill_items,
                });
            }
        }
        if spec.line && groups.len() > 1 && overlaps.iter().all(|&o| o == 0) {
            return Err(LayoutError::NonSlidingAccess {
                func: func.to_string(),
                value: value.to_string(),
            });
        }
        Ok(())
    }
}

fn expand_stream_all(t: &crate::value::Tensor, out: &mut Vec<Vec<i64>>) {
    fn walk(t: &crate::value::Tensor, idx: &mut Vec<i64>, d: usize, out: &mut Vec<Vec<i64>>) {
        if d == t.rank() {
            out.push(idx.clone());
            return;
        }
        for i in 0..t.shape[d] {
            idx.push(t.origin[d] + i as i64);
            walk(t, idx, d + 1, out);
            idx.pop();
        }
    }
    walk(t, &mut Vec::new(), 0, out);
}

struct ItemWalker<'a, 'b> {
    b: &'a Builder<'b>,
    pe: usize,
    nest: &'a LoopNest,
    orig_stmt: &'a [usize],
    occ_table: &'a [BTreeMap<String, Vec<usize>>],
    epoch_vars: &'a [String],
    items: Vec<Item>,
    slots: usize,
}

impl<'a, 'b> ItemWalker<'a, 'b> {
    fn eval_i64(&self, e: &Expr, env: &BTreeMap<String, i64>) -> Result<i64, LayoutError> {
        let mut full = env.clone();
        for (k, v) in &self.b.pe_id_env[self.pe] {
            full.entry(k.clone()).or_insert(*v);
        }
        self.b.eval_i64(e, &full)
    }

    fn walk(&mut self, depth: usize, env: &mut BTreeMap<String, i64>) -> Result<(), LayoutError> {
        if depth == self.nest.loops.len() {
            return self.body(env);
        }
        let l = self.nest.loops[depth].clone();
        let lo = self.eval_i64(&l.lo, env)?;
        let hi = self.eval_i64(&l.hi, env)?;
        let step = self.eval_i64(&l.step, env)?;
        if step <= 0 {
            return Err(LayoutError::InconsistentWiring(format!(
                "loop {} has non-positive step {step}",
                l.var
            )));
        }
        let mut v = lo;
        while v < hi {
            env.insert(l.var.clone(), v);
            self.walk(depth + 1, env)?;
            v += step;
        }
        env.remove(&l.var);
        Ok(())
    }

    fn body(&mut self, env: &mut BTreeMap<String, i64>) -> Result<(), LayoutError> {
        let mut bound = Vec::new();
        for (name, e) in &self.nest.lets.clone() {
            let v = self.eval_i64(e, env)?;
            env.insert(name.clone(), v);
            bound.push(name.clone());
        }
        let epoch: Vec<i64> = self
            .epoch_vars
            .iter()
            .map(|v| {
                env.get(v)
                    .copied()
                    .or_else(|| self.b.pe_id_env[self.pe].get(v).copied())
                    .unwrap_or(0)
            })
            .collect();
        let body = self.nest.body.clone();
        for (kept_idx, stmt) in body.iter().enumerate() {
            let sidx = self.orig_stmt[kept_idx];
            if let Some(g) = stmt.guard() {
                if self.eval_i64(g, env)? == 0 {
                    continue;
                }
            }
            let mut full_env = env.clone();
            for (k, v) in &self.b.pe_id_env[self.pe] {
                full_env.entry(k.clone()).or_insert(*v);
            }
            match stmt {
                BodyStmt::Def(st) => {
                    let mut occ_cursors: BTreeMap<String, usize> = BTreeMap::new();
                    let mut new_items = Vec::new();
                    let mut lhs_rw = Vec::new();
                    for e in &st.lhs_indices {
                        lhs_rw.push(self.rewrite(
                            e,
                            &full_env,
                            &epoch,
                            sidx,
                            &mut occ_cursors,
                            &mut new_items,
                        )?);
                    }
                    let rhs = self.rewrite(
                        &st.rhs,
                        &full_env,
                        &epoch,
                        sidx,
                        &mut occ_cursors,
                        &mut new_items,
                    )?;
                    let lhs_static = lhs_rw.iter().all(static_expr);
                    let lhs = if lhs_static {
                        let mut idx = Vec::new();
                        for e in &lhs_rw {
                            idx.push(self.eval_i64(e, env)?);
                        }
                        LhsSpec::Static(idx)
                    } else {
                        LhsSpec::Dynamic(lhs_rw)
                    };
                    let write_elem = match &lhs {
                        LhsSpec::Static(v) => Some(v.clone()),
                        LhsSpec::Dynamic(_) => None,
                    };
                    self.items.extend(new_items);
                    self.items.push(Item {
                        kind: ItemKind::Compute {
                            rhs,
                            lhs,
                            is_update: st.is_update,
                            stmt: sidx,
                            write_elem,
                        },
                        env: full_env,
                        epoch: epoch.clone(),
                    });
                }
                BodyStmt::ForwardRead {
                    value,
                    access,
                    consumer_slot,
                    ..
                } => {
                    let mut idx = Vec::new();
                    for e in access {
                        idx.push(self.eval_i64(e, env)?);
                    }
                    let rank = self
                        .b
                        .binding
                        .tensor(value)
                        .map(|t| t.rank())
                        .unwrap_or(idx.len());
                    if idx.len() < rank {
                        let t = self.b.binding.tensor(value).ok_or_else(|| {
                            LayoutError::InconsistentWiring(format!(
                                "stream access to unbound tensor `{value}`"
                            ))
                        })?;
                        let mut elems = Vec::new();
                        expand_stream_prefix(t, &idx, &mut elems);
                        for elem in elems {
                            self.items.push(Item {
                                kind: ItemKind::ChainSend {
                                    value: value.clone(),
                                    elem,
                                    occ: *consumer_slot,
                                },
                                env: full_env.clone(),
                                epoch: epoch.clone(),
                            });
                        }
                    } else {
                        self.items.push(Item {
                            kind: ItemKind::ChainSend {
                                value: value.clone(),
                                elem: idx,
                                occ: *consumer_slot,
                            },
                            env: full_env,
                            epoch: epoch.clone(),
                        });
                    }
                }
                BodyStmt::ForwardWrite { value, access, .. } => {
                    let mut idx = Vec::new();
                    for e in access {
                        idx.push(self.eval_i64(e, env)?);
                    }
                    self.items.push(Item {
                        kind: ItemKind::ChainRecv {
                            value: value.clone(),
                            elem: idx,
                        },
                        env: full_env,
                        epoch: epoch.clone(),
                    });
                }
            }
        }
        for name in bound {
            env.remove(&name);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn rewrite(
        &mut self,
        e: &Expr,
        env: &BTreeMap<String, i64>,
        epoch: &[i64],
        stmt: usize,
        occ_cursors: &mut BTreeMap<String, usize>,
        out: &mut Vec<Item>,
    ) -> Result<Expr, LayoutError> {
        match e {
            Expr::IntConst(_) | Expr::FloatConst(_) | Expr::Var(_) => Ok(e.clone()),
            Expr::ParamRef(n, idx) => {
                if self.b.binding.scalar(n).is_some() {
                    return Ok(e.clone());
                }
                self.rewrite_read(n, idx, env, epoch, stmt, occ_cursors, out)
            }
            Expr::FuncRef(n, idx) => {
                let is_extern_func = self
                    .b
                    .sp
                    .program
                    .func(n)
                    .map(|f| f.definitions.is_empty())
                    .unwrap_or(false)
                    && self.b.sp.program.extern_sig(n).is_some();
                if is_extern_func {
                    let mut port = 0i64;
                    for a in idx {
                        if tensor_refs(a).is_empty() && static_expr(a) {
                            port = self.eval_i64(a, env)?;
                        }
                    }
                    let slot = self.slots;
                    self.slots += 1;
                    out.push(Item {
                        kind: ItemKind::ExternRead {
                            func: n.clone(),
                            port: port.max(0) as usize,
                            slot,
                        },
                        env: env.clone(),
                        epoch: epoch.to_vec(),
                    });
                    // Occurrence accounting still advances for this value.
                    let c = occ_cursors.entry(n.clone()).or_insert(0);
                    *c += 1;
                    return Ok(Expr::Var(format!("$s{slot}")));
                }
                self.rewrite_read(n, idx, env, epoch, stmt, occ_cursors, out)
            }
            Expr::Call(n, args) => {
                let mut new_args = Vec::new();
                for a in args {
                    new_args.push(self.rewrite(a, env, epoch, stmt, occ_cursors, out)?);
                }
                Ok(Expr::Call(n.clone(), new_args))
            }
            Expr::Binary(op, a, b) => Ok(Expr::bin(
                *op,
                self.rewrite(a, env, epoch, stmt, occ_cursors, out)?,
                self.rewrite(b, env, epoch, stmt, occ_cursors, out)?,
            )),
            Expr::Select(c, a, b) => {
                if !tensor_refs(a).is_empty() || !tensor_refs(b).is_empty() {
                    return Err(LayoutError::InconsistentWiring(
                        "select branches may not read tensors in a spatial body".to_string(),
                    ));
                }
                Ok(Expr::Select(
                    Box::new(self.rewrite(c, env, epoch, stmt, occ_cursors, out)?),
                    a.clone(),
                    b.clone(),
                ))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn rewrite_read(
        &mut self,
        value: &str,
        idx: &[Expr],
        env: &BTreeMap<String, i64>,
        epoch: &[i64],
        stmt: usize,
        occ_cursors: &mut BTreeMap<String, usize>,
        out: &mut Vec<Item>,
    ) -> Result<Expr, LayoutError> {
        let mut rewritten = Vec::new();
        for i in idx {
            rewritten.push(self.rewrite(i, env, epoch, stmt, occ_cursors, out)?);
        }
        let is_static = rewritten.iter().all(static_expr);
        let elem = if is_static {
            let mut v = Vec::new();
            for e in &rewritten {
                v.push(self.eval_i64(e, env)?);
            }
            Some(v)
        } else {
            None
        };
        let cursor = occ_cursors.entry(value.to_string()).or_insert(0);
        let occ = self
            .occ_table
            .get(stmt)
            .and_then(|m| m.get(value))
            .and_then(|v| v.get(*cursor))
            .copied()
            .unwrap_or(*cursor);
        *cursor += 1;
        let slot = self.slots;
        self.slots += 1;
        out.push(Item {
            kind: ItemKind::Read {
                value: value.to_string(),
                elem,
                idx_exprs: rewritten,
                occ,
                slot,
            },
            env: env.clone(),
            epoch: epoch.to_vec(),
        });
        Ok(Expr::Var(format!("$s{slot}")))
    }
}

fn expand_stream_prefix(t: &crate::value::Tensor, prefix: &[i64], out: &mut Vec<Vec<i64>>) {
    fn walk(t: &crate::value::Tensor, idx: &mut Vec<i64>, d: usize, out: &mut Vec<Vec<i64>>) {
        if d == t.rank() {
            out.push(idx.clone());
            return;
        }
        for i in 0..t.shape[d] {
            idx.push(t.origin[d] + i as i64);
            walk(t, idx, d + 1, out);
            idx.pop();
        }
    }
    let mut idx = prefix.to_vec();
    walk(t, &mut idx, prefix.len(), out);
}

/// Build the spatial graph: one PE per point of each function's unrolled
/// cross-product, channels split and wired per value, scripts assembled.
pub fn instantiate_pes(
    sp: &ScheduledProgram,
    binding: &Binding,
    registry: &Registry,
) -> Result<SpatialGraph, LayoutError> {
    let mut b = Builder {
        sp,
        binding,
        registry,
        pes: Vec::new(),
        pe_dims: Vec::new(),
        pe_id_env: Vec::new(),
        func_pes: BTreeMap::new(),
        items: Vec::new(),
        emit_elem: Vec::new(),
        emissions: BTreeMap::new(),
        writes_by_elem: Vec::new(),
        routes: Vec::new(),
        copies: Vec::new(),
        chan_map: BTreeMap::new(),
        channels: Vec::new(),
        stores: Vec::new(),
        store_map: BTreeMap::new(),
        chain_demands: BTreeMap::new(),
        used: Vec::new(),
        active: Vec::new(),
        fills: Vec::new(),
        buf_specs: Vec::new(),
        buf_served: Vec::new(),
        dyn_flush: Vec::new(),
        vec_width: BTreeMap::new(),
        extern_out_ports: BTreeMap::new(),
        extern_in_chans: BTreeMap::new(),
        extern_out_groups: BTreeMap::new(),
        extern_explicit: BTreeMap::new(),
        extern_sink_port: BTreeMap::new(),
        claimed_outputs: BTreeMap::new(),
        fwd_used: BTreeMap::new(),
    };
    b.enumerate_pes()?;
    b.enumerate_items()?;
    b.emission_analysis();
    b.resolve_regular_reads()?;
    b.wire_externs()?;
    b.process_producer_chains()?;
    b.process_consumer_chains()?;
    b.finish_sinks()?;
    b.assemble()
}

impl<'a> Builder<'a> {
    fn assign_route(&mut self, slot: &RouteSlot, route: ReadRoute) -> Result<(), LayoutError> {
        match slot {
            RouteSlot::Item { pe, item } => {
                self.routes[*pe].insert(*item, route);
                Ok(())
            }
            RouteSlot::Fill { pe, fill, idx } => self.patch_fill(*pe, *fill, *idx, &route),
            RouteSlot::ExternIn { pe, port } => {
                let chan = match route {
                    ReadRoute::ChanKeyed { chan, .. } | ReadRoute::ChanStream { chan } => chan,
                    other => {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "extern input requires a channel, got {other:?}"
                        )))
                    }
                };
                self.extern_in_chans
                    .entry(*pe)
                    .or_default()
                    .insert(*port, chan);
                Ok(())
            }
        }
    }

    // -- Extern wiring -------------------------------------------------------

    fn wire_externs(&mut self) -> Result<(), LayoutError> {
        for pe in 0..self.pes.len() {
            if !self.pes[pe].is_extern {
                continue;
            }
            let func = self.pes[pe].func.clone();
            if self.pes[pe].nest.is_some() {
                self.wire_extern_with_nest(pe, &func)?;
            } else {
                self.wire_extern_defless(pe, &func)?;
            }
        }
        Ok(())
    }

    /// An extern-implemented function with a temporal definition: its single
    /// specialized statement's call arguments define the wiring.
    fn wire_extern_with_nest(&mut self, pe: usize, func: &str) -> Result<(), LayoutError> {
        let nest = self.pes[pe].nest.clone().unwrap();
        if !nest.loops.is_empty() {
            return Err(LayoutError::InconsistentWiring(format!(
                "extern function `{func}` must be fully unrolled"
            )));
        }
        let stmts: Vec<&BodyStmt> = nest.body.iter().collect();
        if stmts.len() != 1 {
            return Err(LayoutError::InconsistentWiring(format!(
                "extern function `{func}` must specialize to exactly one statement per PE, got {}",
                stmts.len()
            )));
        }
        let BodyStmt::Def(st) = stmts[0] else {
            return Err(LayoutError::InconsistentWiring(format!(
                "extern function `{func}` has a forwarding body"
            )));
        };
        let args = match &st.rhs {
            Expr::Call(_, a) => a.clone(),
            Expr::FuncRef(_, a) => a.clone(),
            other => {
                return Err(LayoutError::SignatureMismatch {
                    func: func.to_string(),
                    message: format!("definition is not a call: {other}"),
                })
            }
        };
        // Occurrence table of the full nest, to pair stream arguments with
        // the isolated producer's forwards.
        let full_nest = self.sp.funcs[func].nest.as_ref().unwrap().clone();
        let (_, orig_map) = specialize(&full_nest, &self.pe_id_env[pe]);
        let occs = occ_table(&full_nest);
        let active_stmt = orig_map[0];
        let env = self.pe_id_env[pe].clone();
        let mut explicit = Vec::new();
        let mut in_ports = 0usize;
        let mut occ_cursors: BTreeMap<String, usize> = BTreeMap::new();
        for a in &args {
            match a {
                Expr::ParamRef(n, idx) if self.binding.tensor(n).is_some() => {
                    let iso = self.sp.producer_chain(func, n).cloned().ok_or_else(|| {
                        LayoutError::InconsistentWiring(format!(
                            "extern `{func}` consumes `{n}` which has no isolated producer"
                        ))
                    })?;
                    let mut prefix = Vec::new();
                    for e in idx {
                        prefix.push(self.eval_i64(e, &env)?);
                    }
                    let t = self.binding.tensor(n).unwrap().clone();
                    let mut elems = Vec::new();
                    expand_stream_prefix(&t, &prefix, &mut elems);
                    let cursor = occ_cursors.entry(n.clone()).or_insert(0);
                    let occ = occs
                        .get(active_stmt)
                        .and_then(|m| m.get(n))
                        .and_then(|v| v.get(*cursor))
                        .copied()
                        .unwrap_or(*cursor);
                    *cursor += 1;
                    let port = in_ports;
                    in_ports += 1;
                    for elem in elems {
                        self.chain_demands.entry(iso.seq).or_default().push(Demand {
                            elem,
                            occ: Some(occ),
                            from_fill: false,
                            env: env.clone(),
                            entry: Entry::ExternPort { pe, port },
                            slot: RouteSlot::ExternIn { pe, port },
                        });
                    }
                }
                Expr::FuncRef(n, idx) if self.sp.program.func(n).is_some() => {
                    let mut want = Vec::new();
                    for e in idx {
                        want.push(self.eval_i64(e, &env)?);
                    }
                    let child = self
                        .func_pes
                        .get(n)
                        .and_then(|pes| pes.iter().copied().find(|&c| self.pes[c].id == want))
                        .ok_or_else(|| {
                            LayoutError::InconsistentWiring(format!(
                                "`{func}` reads {n}{want:?} but no such PE exists"
                            ))
                        })?;
                    // Validate declared forwarding geometry: the producer must
                    // reach this PE along its relay direction.
                    if let Some(rule) = self.sp.relay_for(func, n).cloned() {
                        let d = self.const_dir(n, child, &rule).ok_or_else(|| {
                            LayoutError::InconsistentWiring(
                                "relay direction does not evaluate at the producer".to_string(),
                            )
                        })?;
                        let target: Vec<i64> = self.pes[child]
                            .pos
                            .iter()
                            .zip(&d)
                            .map(|(p, dd)| p + dd)
                            .collect();
                        if target != self.pes[pe].pos {
                            return Err(LayoutError::InconsistentWiring(format!(
                                "relay direction sends {} to {target:?}, but its consumer is {}",
                                self.pes[child].label(),
                                self.pes[pe].label()
                            )));
                        }
                    }
                    if let Some(prev) = self.claimed_outputs.insert(child, pe) {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "output of {} is consumed by both {} and {}",
                            self.pes[child].label(),
                            self.pes[prev].label(),
                            self.pes[pe].label()
                        )));
                    }
                    let port = in_ports;
                    in_ports += 1;
                    let key = ChanKey::ExternOut {
                        src: child,
                        port: 0,
                    };
                    let value = n.clone();
                    let c = self.channel(key, |_| Channel {
                        kind: ChannelKind::Register,
                        src: Endpoint::Pe(child),
                        dst: Endpoint::Pe(pe),
                        value,
                        depth: None,
                        min_depth: 1,
                        width: 1,
                        tagged: false,
                        store: None,
                        dst_port: Some(port),
                    });
                    self.channels[c].min_depth = self.min_depth_for(n, n, &Endpoint::Pe(pe));
                    self.extern_out_ports.insert((child, 0), c);
                    self.extern_in_chans.entry(pe).or_default().insert(port, c);
                }
                other => {
                    if !tensor_refs(other).is_empty() {
                        return Err(LayoutError::SignatureMismatch {
                            func: func.to_string(),
                            message: format!("unsupported extern argument {other}"),
                        });
                    }
                    explicit.push(ExternArg::Int(self.eval_i64(other, &env)?));
                }
            }
        }
        self.extern_explicit.insert(pe, explicit);
        Ok(())
    }

    /// An extern with no temporal definition (decoder, fetcher): its input
    /// groups come from isolations that target it, its explicit matrices from
    /// isolations it serves as a chain member.
    fn wire_extern_defless(&mut self, pe: usize, func: &str) -> Result<(), LayoutError> {
        let sig = self.sp.program.extern_sig(func).unwrap().clone();
        let isos: Vec<Isolation> = self
            .sp
            .isolations
            .iter()
            .filter(|i| i.kind == ChainKind::Producer && i.target == func)
            .cloned()
            .collect();
        let mut in_port = 0usize;
        for iso in &isos {
            let tail = iso.chain.last().unwrap().clone();
            if self.sp.program.extern_sig(&tail).is_none() {
                return Err(LayoutError::InconsistentWiring(format!(
                    "chain `{tail}` feeding extern `{func}` must be extern-implemented"
                )));
            }
            let n = self
                .registry
                .array_size(&sig.impl_name, self.binding)
                .map_err(|m| LayoutError::SignatureMismatch {
                    func: func.to_string(),
                    message: m,
                })?;
            for port in 0..n {
                let c = self.extern_group_channel(iso, &tail, port, pe)?;
                self.channels[c].dst_port = Some(in_port);
                self.extern_in_chans
                    .entry(pe)
                    .or_default()
                    .insert(in_port, c);
                in_port += 1;
            }
        }
        let mut explicit = Vec::new();
        for iso in &self.sp.isolations {
            if iso.kind == ChainKind::Producer && iso.chain.iter().any(|c| c == func) {
                explicit.push(ExternArg::Param(iso.value.clone()));
            }
        }
        self.extern_explicit.insert(pe, explicit);
        Ok(())
    }

    // -- Producer chain matching ----------------------------------------------

    fn process_producer_chains(&mut self) -> Result<(), LayoutError> {
        let isolations: Vec<Isolation> = self
            .sp
            .isolations
            .iter()
            .filter(|i| i.kind == ChainKind::Producer)
            .cloned()
            .collect();
        for iso in isolations {
            let tail = iso.chain.last().unwrap().clone();
            if self.sp.program.extern_sig(&tail).is_some() {
                // Extern-to-extern groups are wired directly.
                continue;
            }
            let mut demands = self.chain_demands.remove(&iso.seq).unwrap_or_default();
            for fi in (0..iso.chain.len()).rev() {
                let fname = iso.chain[fi].clone();
                let fpes = self.func_pes.get(&fname).cloned().unwrap_or_default();
                let mut matched: Vec<(usize, usize, Demand)> = Vec::new();
                'demands: for d in demands.drain(..) {
                    let target_pe = match &d.entry {
                        Entry::Direct { pe } => *pe,
                        Entry::Relay { head, .. } => *head,
                        Entry::ExternPort { pe, .. } => *pe,
                    };
                    // First pass: exact occurrence; second: fills may take any.
                    for relaxed in [false, true] {
                        if relaxed && !d.from_fill {
                            break;
                        }
                        for &cpe in &fpes {
                            if !self.pe_compat(cpe, target_pe) {
                                continue;
                            }
                            for i in 0..self.items[cpe].len() {
                                if self.used[cpe][i] {
                                    continue;
                                }
                                let item = &self.items[cpe][i];
                                let ItemKind::ChainSend { value, elem, occ } = &item.kind else {
                                    continue;
                                };
                                if *value != iso.value || *elem != d.elem {
                                    continue;
                                }
                                if let Some(docc) = d.occ {
                                    if *occ != docc && !relaxed {
                                        continue;
                                    }
                                }
                                if !env_compat(&item.env, &d.env) {
                                    continue;
                                }
                                self.used[cpe][i] = true;
                                self.active[cpe][i] = true;
                                matched.push((cpe, i, d));
                                continue 'demands;
                            }
                        }
                    }
                    return Err(LayoutError::InconsistentWiring(format!(
                        "`{fname}` provides no instance of {}{:?} (occurrence {:?}) \
                         compatible with its consumer",
                        iso.value, d.elem, d.occ
                    )));
                }
                // Out-copies toward the consumer side.
                for (cpe, i, d) in &matched {
                    let (in_chan, first_hop, dest) = self.wire_entry(*cpe, &d.entry, &iso.value)?;
                    self.copies[*cpe]
                        .entry(*i)
                        .or_default()
                        .push(EmitCopy::Chan {
                            chan: first_hop,
                            dest,
                        });
                    self.assign_route(
                        &d.slot,
                        ReadRoute::ChanKeyed {
                            chan: in_chan,
                            elem: d.elem.clone(),
                        },
                    )?;
                }
                // In-sides: where do the active forwards get their elements?
                let upstream = self.chain_upstream(&iso, fi)?;
                let has_buf = !self.buffers_for(&fname, &iso.value).is_empty();
                let mut next_demands: Vec<Demand> = Vec::new();
                if has_buf {
                    for (cpe, i, _) in &matched {
                        let item = self.items[*cpe][*i].clone();
                        let ItemKind::ChainSend { elem, occ, .. } = &item.kind else {
                            unreachable!()
                        };
                        let bufs = self.pe_buffers(*cpe, &fname, &iso.value);
                        let buf = *bufs.last().unwrap();
                        self.buf_served[*cpe][buf].push(ServedRead {
                            item: *i,
                            elem: Some(elem.clone()),
                            env: item.env.clone(),
                            epoch: item.epoch.clone(),
                            occ: *occ,
                        });
                        self.routes[*cpe].insert(
                            *i,
                            ReadRoute::Buffer {
                                buf,
                                elem: elem.clone(),
                            },
                        );
                    }
                    for &cpe in &fpes {
                        let pending = self.compute_fills(cpe, &fname)?;
                        for p in pending {
                            self.route_chain_in(
                                &iso,
                                &upstream,
                                p.pe,
                                p.elem,
                                p.env,
                                p.occ,
                                RouteSlot::Fill {
                                    pe: p.pe,
                                    fill: p.fill,
                                    idx: p.idx,
                                },
                                &mut next_demands,
                            )?;
                        }
                    }
                } else {
                    for (cpe, i, _) in &matched {
                        let item = self.items[*cpe][*i].clone();
                        let ItemKind::ChainSend { elem, occ, .. } = &item.kind else {
                            unreachable!()
                        };
                        self.route_chain_in(
                            &iso,
                            &upstream,
                            *cpe,
                            elem.clone(),
                            item.env.clone(),
                            *occ,
                            RouteSlot::Item { pe: *cpe, item: *i },
                            &mut next_demands,
                        )?;
                    }
                }
                match upstream {
                    ChainUpstream::Prev => {
                        demands = next_demands;
                    }
                    ChainUpstream::MemoryHop { .. } => {
                        // Host side emits its full walk; no further matching.
                        self.activate_host_side(&iso, fi)?;
                        break;
                    }
                    ChainUpstream::ParamSource | ChainUpstream::SelfStore => break,
                }
            }
        }
        Ok(())
    }

    fn chain_upstream(&mut self, iso: &Isolation, fi: usize) -> Result<ChainUpstream, LayoutError> {
        if fi == 0 {
            if self.sp.program.param(&iso.value).is_some() {
                return Ok(ChainUpstream::ParamSource);
            }
            if iso.value == iso.target {
                return Ok(ChainUpstream::SelfStore);
            }
            return Err(LayoutError::InconsistentWiring(format!(
                "chain source for `{}` must be a parameter or the function itself",
                iso.value
            )));
        }
        let prev = &iso.chain[fi - 1];
        let prev_host = self.sp.funcs[prev].placement == Placement::Host;
        if prev_host {
            let store = self.store_for(&format!("mem:{}:{}", iso.seq, fi), None);
            Ok(ChainUpstream::MemoryHop { store, hop: fi })
        } else {
            Ok(ChainUpstream::Prev)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn route_chain_in(
        &mut self,
        iso: &Isolation,
        upstream: &ChainUpstream,
        pe: usize,
        elem: Vec<i64>,
        env: BTreeMap<String, i64>,
        occ: usize,
        slot: RouteSlot,
        next_demands: &mut Vec<Demand>,
    ) -> Result<(), LayoutError> {
        match upstream {
            ChainUpstream::Prev => {
                next_demands.push(Demand {
                    elem,
                    occ: Some(occ),
                    from_fill: matches!(slot, RouteSlot::Fill { .. }),
                    env,
                    entry: Entry::Direct { pe },
                    slot,
                });
                Ok(())
            }
            ChainUpstream::MemoryHop { store, hop } => {
                let prev = &iso.chain[hop - 1];
                let prev_pe = self.single_pe(prev)?;
                let chan = self.channel(
                    ChanKey::HopMem {
                        iso: iso.seq,
                        hop: *hop,
                    },
                    |_| Channel {
                        kind: ChannelKind::Memory,
                        src: Endpoint::Pe(prev_pe),
                        dst: Endpoint::Pe(pe),
                        value: iso.value.clone(),
                        depth: None,
                        min_depth: 1,
                        width: 1,
                        tagged: false,
                        store: Some(*store),
                        dst_port: None,
                    },
                );
                self.assign_route(
                    &slot,
                    ReadRoute::Mem {
                        store: *store,
                        elem,
                        chan: Some(chan),
                    },
                )
            }
            ChainUpstream::ParamSource => {
                let store = self.store_for(&format!("param:{}", iso.value), Some(&iso.value));
                let chan = if self.pes[pe].placement == Placement::Device {
                    Some(self.channel(
                        ChanKey::ParamMem {
                            param: iso.value.clone(),
                            dst: pe,
                        },
                        |_| Channel {
                            kind: ChannelKind::Memory,
                            src: Endpoint::Host(iso.value.clone()),
                            dst: Endpoint::Pe(pe),
                            value: iso.value.clone(),
                            depth: None,
                            min_depth: 1,
                            width: 1,
                            tagged: false,
                            store: Some(store),
                            dst_port: None,
                        },
                    ))
                } else {
                    None
                };
                self.assign_route(&slot, ReadRoute::Mem { store, elem, chan })
            }
            ChainUpstream::SelfStore => self.assign_route(&slot, ReadRoute::Local { elem }),
        }
    }

    fn single_pe(&self, func: &str) -> Result<usize, LayoutError> {
        let pes = self.func_pes.get(func).cloned().unwrap_or_default();
        if pes.len() != 1 {
            return Err(LayoutError::InconsistentWiring(format!(
                "`{func}` must be a single PE here, found {}",
                pes.len()
            )));
        }
        Ok(pes[0])
    }

    /// Host-side chain functions emit their full walk into memory stores.
    fn activate_host_side(&mut self, iso: &Isolation, device_fi: usize) -> Result<(), LayoutError> {
        for fi in (0..device_fi).rev() {
            let fname = iso.chain[fi].clone();
            let fpes = self.func_pes.get(&fname).cloned().unwrap_or_default();
            // The memory store this level writes into.
            let out_store = self.store_for(&format!("mem:{}:{}", iso.seq, fi + 1), None);
            let out_chan = self.chan_map.get(&ChanKey::HopMem {
                iso: iso.seq,
                hop: fi + 1,
            });
            let out_chan = out_chan.copied();
            let upstream = self.chain_upstream(iso, fi)?;
            for pe in fpes {
                for i in 0..self.items[pe].len() {
                    let item = self.items[pe][i].clone();
                    let ItemKind::ChainSend { value, elem, occ } = &item.kind else {
                        continue;
                    };
                    if *value != iso.value {
                        continue;
                    }
                    self.active[pe][i] = true;
                    self.copies[pe]
                        .entry(i)
                        .or_default()
                        .push(EmitCopy::MemWrite {
                            store: out_store,
                            chan: out_chan,
                        });
                    let mut dummy = Vec::new();
                    self.route_chain_in(
                        iso,
                        &upstream,
                        pe,
                        elem.clone(),
                        item.env.clone(),
                        *occ,
                        RouteSlot::Item { pe, item: i },
                        &mut dummy,
                    )?;
                    if !dummy.is_empty() {
                        return Err(LayoutError::InconsistentWiring(
                            "register hop between host functions".to_string(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    // -- Consumer chains (drains) ----------------------------------------------

    /// Exit path for a value leaving `func`'s array at PE `wpe`: ride a relay
    /// direction to the boundary, preferring one where the PE already sits at
    /// the edge, then hand off to the consumer side.
    fn drain_exit(
        &mut self,
        func: &str,
        wpe: usize,
        value: &str,
    ) -> Result<(Option<usize>, usize), LayoutError> {
        let rules: Vec<(usize, RelayRule)> = self.sp.funcs[func]
            .relays
            .iter()
            .enumerate()
            .filter(|(_, r)| r.value == value)
            .map(|(i, r)| (i, r.clone()))
            .collect();
        if rules.is_empty() {
            return Ok((None, wpe));
        }
        let fpes = self.func_pes[func].clone();
        let at_tail = |b: &Self, pe: usize, d: &[i64]| {
            let next: Vec<i64> = b.pes[pe].pos.iter().zip(d).map(|(p, dd)| p + dd).collect();
            !fpes.iter().any(|&q| b.pes[q].pos == next)
        };
        let mut chosen: Option<(usize, Vec<i64>)> = None;
        for (ridx, rule) in &rules {
            if let Some(d) = self.const_dir(func, wpe, rule) {
                if at_tail(self, wpe, &d) {
                    chosen = Some((*ridx, d));
                    break;
                }
            }
        }
        if chosen.is_none() {
            let (ridx, rule) = &rules[0];
            let d = self.const_dir(func, wpe, rule).ok_or_else(|| {
                LayoutError::InconsistentWiring(
                    "non-constant relay direction cannot drain".to_string(),
                )
            })?;
            chosen = Some((*ridx, d));
        }
        let (ridx, d) = chosen.unwrap();
        let mut cur = wpe;
        let mut first = None;
        while !at_tail(self, cur, &d) {
            let next_pos: Vec<i64> = self.pes[cur]
                .pos
                .iter()
                .zip(&d)
                .map(|(p, dd)| p + dd)
                .collect();
            let next = fpes
                .iter()
                .copied()
                .find(|&q| self.pes[q].pos == next_pos)
                .unwrap();
            let hop = self.register_channel(
                ChanKey::RelayHop {
                    value: value.to_string(),
                    dir: ridx,
                    src: cur,
                    dst: next,
                },
                cur,
                Endpoint::Pe(next),
                value,
            );
            if first.is_none() {
                first = Some(hop);
            }
            cur = next;
        }
        Ok((first, cur))
    }

    /// Forward one produced element toward a consumer-chain PE. Returns the
    /// channel the producer writes first and the channel the consumer reads.
    fn route_to_consumer(
        &mut self,
        src_func: &str,
        src_pe: usize,
        value: &str,
        dst_pe: usize,
    ) -> Result<(usize, usize), LayoutError> {
        let (first, tail) = self.drain_exit(src_func, src_pe, value)?;
        if !self.pe_compat(tail, dst_pe) {
            return Err(LayoutError::InconsistentWiring(format!(
                "boundary {} cannot reach consumer {}: shared unrolled loops disagree",
                self.pes[tail].label(),
                self.pes[dst_pe].label()
            )));
        }
        let drain = self.register_channel(
            ChanKey::Drain {
                value: value.to_string(),
                src: tail,
                dst: dst_pe,
            },
            tail,
            Endpoint::Pe(dst_pe),
            value,
        );
        Ok((first.unwrap_or(drain), drain))
    }

    fn process_consumer_chains(&mut self) -> Result<(), LayoutError> {
        let isolations: Vec<Isolation> = self
            .sp
            .isolations
            .iter()
            .filter(|i| i.kind == ChainKind::Consumer)
            .cloned()
            .collect();
        for iso in isolations {
            let target = iso.target.clone();
            let value = iso.value.clone();
            let chain = iso.chain.clone();
            let emap = self.emissions.get(&target).cloned().unwrap_or_default();
            let mut drained: BTreeSet<Vec<i64>> = BTreeSet::new();
            // Compute-adjacent function receives the drains.
            let fname = chain.last().unwrap().clone();
            let fpes = self.func_pes.get(&fname).cloned().unwrap_or_default();
            for pe in fpes {
                for i in 0..self.items[pe].len() {
                    let item = self.items[pe][i].clone();
                    let ItemKind::ChainRecv { value: v, elem } = &item.kind else {
                        continue;
                    };
                    if *v != value {
                        continue;
                    }
                    let (wpe, witem) = *emap.get(elem).ok_or_else(|| {
                        LayoutError::InconsistentWiring(format!(
                            "`{fname}` expects {value}{elem:?} which `{target}` never emits"
                        ))
                    })?;
                    if !drained.insert(elem.clone()) {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "{value}{elem:?} would drain twice; remove the loops the \
                             consumer chain does not need"
                        )));
                    }
                    let (first_hop, drain) = self.route_to_consumer(&target, wpe, &value, pe)?;
                    self.copies[wpe]
                        .entry(witem)
                        .or_default()
                        .push(EmitCopy::Chan {
                            chan: first_hop,
                            dest: None,
                        });
                    self.routes[pe].insert(
                        i,
                        ReadRoute::ChanKeyed {
                            chan: drain,
                            elem: elem.clone(),
                        },
                    );
                    self.active[pe][i] = true;
                }
            }
            for elem in emap.keys() {
                if !drained.contains(elem) {
                    return Err(LayoutError::InconsistentWiring(format!(
                        "{value}{elem:?} is never drained by the consumer chain; \
                         the chain's loop structure does not cover it"
                    )));
                }
            }
            // Remaining hops toward memory.
            for fi in (0..chain.len() - 1).rev() {
                let f = chain[fi].clone();
                let next = chain[fi + 1].clone();
                let memory_hop = self.sp.funcs[&f].placement == Placement::Host;
                let fpes = self.func_pes.get(&f).cloned().unwrap_or_default();
                if memory_hop {
                    let store = self.store_for(&format!("mem:{}:{}", iso.seq, fi), None);
                    let next_pe = self.single_pe(&next)?;
                    for pe in fpes {
                        let chan = self.channel(
                            ChanKey::HopMem {
                                iso: iso.seq,
                                hop: fi,
                            },
                            |_| Channel {
                                kind: ChannelKind::Memory,
                                src: Endpoint::Pe(next_pe),
                                dst: Endpoint::Pe(pe),
                                value: value.clone(),
                                depth: None,
                                min_depth: 1,
                                width: 1,
                                tagged: false,
                                store: Some(store),
                                dst_port: None,
                            },
                        );
                        for i in 0..self.items[pe].len() {
                            let item = self.items[pe][i].clone();
                            let ItemKind::ChainRecv { value: v, elem } = &item.kind else {
                                continue;
                            };
                            if *v != value {
                                continue;
                            }
                            self.routes[pe].insert(
                                i,
                                ReadRoute::Mem {
                                    store,
                                    elem: elem.clone(),
                                    chan: Some(chan),
                                },
                            );
                            self.active[pe][i] = true;
                        }
                    }
                    // The compute-side function writes the store.
                    for npe in self.func_pes.get(&next).cloned().unwrap_or_default() {
                        for i in 0..self.items[npe].len() {
                            if !self.active[npe][i] {
                                continue;
                            }
                            if matches!(self.items[npe][i].kind, ItemKind::ChainRecv { value: ref v, .. } if *v == value)
                            {
                                self.copies[npe]
                                    .entry(i)
                                    .or_default()
                                    .push(EmitCopy::MemWrite {
                                        store,
                                        chan: self
                                            .chan_map
                                            .get(&ChanKey::HopMem {
                                                iso: iso.seq,
                                                hop: fi,
                                            })
                                            .copied(),
                                    });
                            }
                        }
                    }
                } else {
                    // Register hop: match this function's recvs against the
                    // compute-side function's active recvs.
                    for pe in fpes {
                        for i in 0..self.items[pe].len() {
                            let item = self.items[pe][i].clone();
                            let ItemKind::ChainRecv { value: v, elem } = &item.kind else {
                                continue;
                            };
                            if *v != value {
                                continue;
                            }
                            let mut found = false;
                            for npe in self.func_pes.get(&next).cloned().unwrap_or_default() {
                                for j in 0..self.items[npe].len() {
                                    if !self.active[npe][j] || self.fwd_used.contains_key(&(npe, j))
                                    {
                                        continue;
                                    }
                                    let nitem = &self.items[npe][j];
                                    let ItemKind::ChainRecv {
                                        value: nv,
                                        elem: nelem,
                                    } = &nitem.kind
                                    else {
                                        continue;
                                    };
                                    if nv != v
                                        || nelem != elem
                                        || !env_compat(&nitem.env, &item.env)
                                    {
                                        continue;
                                    }
                                    let (first_hop, in_chan) =
                                        self.route_to_consumer(&next, npe, &value, pe)?;
                                    self.copies[npe].entry(j).or_default().push(EmitCopy::Chan {
                                        chan: first_hop,
                                        dest: None,
                                    });
                                    self.routes[pe].insert(
                                        i,
                                        ReadRoute::ChanKeyed {
                                            chan: in_chan,
                                            elem: elem.clone(),
                                        },
                                    );
                                    self.active[pe][i] = true;
                                    self.fwd_used.insert((npe, j), true);
                                    found = true;
                                    break;
                                }
                                if found {
                                    break;
                                }
                            }
                            if !found {
                                return Err(LayoutError::InconsistentWiring(format!(
                                    "`{f}` expects {value}{elem:?} which `{next}` does not forward"
                                )));
                            }
                        }
                    }
                }
            }
            // Memory-end function records the outputs.
            let f1 = chain.first().unwrap().clone();
            for pe in self.func_pes.get(&f1).cloned().unwrap_or_default() {
                let sink = self.sink_chan(pe, &value);
                for i in 0..self.items[pe].len() {
                    if !self.active[pe][i] {
                        continue;
                    }
                    if matches!(self.items[pe][i].kind, ItemKind::ChainRecv { value: ref v, .. } if *v == value)
                    {
                        self.copies[pe]
                            .entry(i)
                            .or_default()
                            .push(EmitCopy::Sink { chan: sink });
                    }
                }
            }
        }
        Ok(())
    }

    fn sink_chan(&mut self, pe: usize, value: &str) -> usize {
        let v = value.to_string();
        self.channel(ChanKey::SinkMem { src: pe }, |b| Channel {
            kind: ChannelKind::Memory,
            src: Endpoint::Pe(pe),
            dst: Endpoint::Host(format!("store:{v}")),
            value: v.clone(),
            depth: None,
            min_depth: 1,
            width: b.func_vec_width(&b.pes[pe].func),
            tagged: false,
            store: None,
            dst_port: None,
        })
    }

    // -- Sinks for terminal functions -------------------------------------------

    fn finish_sinks(&mut self) -> Result<(), LayoutError> {
        for (func, pes) in self.func_pes.clone() {
            let st = &self.sp.funcs[&func];
            if st.chain_of.is_some() || self.sp.program.extern_sig(&func).is_some() {
                continue;
            }
            if st.nest.is_none() {
                continue;
            }
            if self.sp.consumer_chain(&func).is_some() {
                continue;
            }
            if !self.sp.readers_of(&func).is_empty() {
                continue;
            }
            // Terminal function: all emissions go to host memory.
            for &pe in &pes {
                let sink = self.sink_chan(pe, &func);
                for i in 0..self.items[pe].len() {
                    if self.emit_elem[pe][i].is_some() {
                        self.copies[pe]
                            .entry(i)
                            .or_default()
                            .push(EmitCopy::Sink { chan: sink });
                    }
                }
            }
        }
        // Dangling extern outputs sink their streams.
        for pe in 0..self.pes.len() {
            if !self.pes[pe].is_extern || self.pes[pe].nest.is_none() {
                continue;
            }
            if !self.claimed_outputs.contains_key(&pe) {
                let func = self.pes[pe].func.clone();
                let sink = self.sink_chan(pe, &func);
                let key = ChanKey::ExternOut { src: pe, port: 0 };
                // The extern writes its out port into the sink channel.
                self.chan_map.entry(key).or_insert(sink);
                self.extern_out_ports.entry((pe, 0)).or_insert(sink);
                self.extern_sink_port.insert(pe, 0);
            }
        }
        Ok(())
    }

    // -- Relay pass-through rules -------------------------------------------------

    fn forward_rules(&self, pe: usize) -> Vec<ForwardRule> {
        let mut rules = Vec::new();
        for (key, &chan) in &self.chan_map {
            let (value, dir, dst) = match key {
                ChanKey::RelayHop {
                    value, dir, dst, ..
                } => (value, *dir, *dst),
                ChanKey::Entry {
                    value,
                    dir: Some(d),
                    dst,
                    ..
                } => (value, *d, *dst),
                _ => continue,
            };
            if dst != pe {
                continue;
            }
            // Outgoing hop for the same value and direction.
            let mut out = None;
            for (k2, &c2) in &self.chan_map {
                if let ChanKey::RelayHop {
                    value: v2,
                    dir: d2,
                    src,
                    ..
                } = k2
                {
                    if v2 == value && *d2 == dir && *src == pe {
                        out = Some(c2);
                        break;
                    }
                }
            }
            if out.is_none() {
                for (k2, &c2) in &self.chan_map {
                    if let ChanKey::Drain { value: v2, src, .. } = k2 {
                        if v2 == value && *src == pe {
                            out = Some(c2);
                            break;
                        }
                    }
                }
            }
            rules.push(ForwardRule {
                in_chan: chan,
                out_chan: out,
            });
        }
        rules
    }

    // -- Final assembly ---------------------------------------------------------

    fn assemble(mut self) -> Result<SpatialGraph, LayoutError> {
        let mut scripts: Vec<Script> = Vec::with_capacity(self.pes.len());
        for pe in 0..self.pes.len() {
            if self.pes[pe].is_extern {
                scripts.push(self.assemble_extern(pe)?);
                continue;
            }
            let mut steps = Vec::new();
            // Fills sorted by insertion point; stable within a point
            // (outermost buffers were pushed first through the parent chain).
            let mut fills_at: BTreeMap<usize, Vec<FillRec>> = BTreeMap::new();
            for f in std::mem::take(&mut self.fills[pe]) {
                for item in &f.items {
                    if matches!(item.src, FillSrc::ChanKeyed { chan } if chan == usize::MAX) {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "unrouted buffer fetch of {}{:?} on {}",
                            self.buf_specs[pe][f.buf].value,
                            item.elem,
                            self.pes[pe].label()
                        )));
                    }
                }
                fills_at.entry(f.before_item).or_default().push(f);
            }
            let items = std::mem::take(&mut self.items[pe]);
            let mut slots = 0usize;
            for (i, item) in items.iter().enumerate() {
                if let Some(frs) = fills_at.remove(&i) {
                    let mut frs = frs;
                    // Parent (outer) buffers fill before their children.
                    frs.sort_by_key(|f| f.buf);
                    for f in frs {
                        steps.push(Step::Fill {
                            buf: f.buf,
                            items: f.items,
                        });
                    }
                }
                match &item.kind {
                    ItemKind::Read { slot, .. } | ItemKind::ExternRead { slot, .. } => {
                        let route = self.routes[pe].remove(&i).ok_or_else(|| {
                            LayoutError::InconsistentWiring(format!(
                                "unrouted read on {} (item {i})",
                                self.pes[pe].label()
                            ))
                        })?;
                        slots = slots.max(slot + 1);
                        steps.push(Step::Read { slot: *slot, route });
                    }
                    ItemKind::Compute {
                        rhs,
                        lhs,
                        is_update,
                        stmt,
                        ..
                    } => {
                        let emit = self.copies[pe].remove(&i).unwrap_or_default();
                        steps.push(Step::Compute(ComputeSpec {
                            env: item.env.iter().map(|(k, v)| (k.clone(), *v)).collect(),
                            rhs: rhs.clone(),
                            lhs: lhs.clone(),
                            is_update: *is_update,
                            emit,
                            emit_elem: self.emit_elem[pe][i].clone(),
                            stmt: *stmt,
                        }));
                    }
                    ItemKind::ChainSend { value, elem, .. } => {
                        if !self.active[pe][i] {
                            continue;
                        }
                        let route = self.routes[pe].remove(&i).ok_or_else(|| {
                            LayoutError::InconsistentWiring(format!(
                                "active forward of {value}{elem:?} on {} has no source",
                                self.pes[pe].label()
                            ))
                        })?;
                        let emit = self.copies[pe].remove(&i).unwrap_or_default();
                        steps.push(Step::ChainForward {
                            value: value.clone(),
                            elem: elem.clone(),
                            route,
                            emit,
                        });
                    }
                    ItemKind::ChainRecv { value, elem } => {
                        if !self.active[pe][i] {
                            return Err(LayoutError::InconsistentWiring(format!(
                                "forward of {value}{elem:?} on {} was never wired",
                                self.pes[pe].label()
                            )));
                        }
                        let route = self.routes[pe].remove(&i).unwrap();
                        let emit = self.copies[pe].remove(&i).unwrap_or_default();
                        steps.push(Step::ChainForward {
                            value: value.clone(),
                            elem: elem.clone(),
                            route,
                            emit,
                        });
                    }
                }
            }
            // Trailing fills (for empty bodies) and the dynamic flush.
            for (_, frs) in fills_at {
                for f in frs {
                    steps.push(Step::Fill {
                        buf: f.buf,
                        items: f.items,
                    });
                }
            }
            if self.dyn_flush[pe] {
                let func = self.pes[pe].func.clone();
                let sink = self.sink_chan(pe, &func);
                steps.push(Step::FlushDyn {
                    copies: vec![EmitCopy::Sink { chan: sink }],
                });
            }
            scripts.push(Script {
                steps,
                buffers: std::mem::take(&mut self.buf_specs[pe]),
                forwards: self.forward_rules(pe),
                out_chans: Vec::new(),
                extern_ports: None,
                extern_sink_port: None,
                slots,
            });
        }
        // Out-channel lists for end-of-stream bookkeeping.
        for (ci, ch) in self.channels.iter().enumerate() {
            if ch.kind != ChannelKind::Register {
                continue;
            }
            if let Endpoint::Pe(src) = ch.src {
                scripts[src].out_chans.push(ci);
            }
        }
        // Host phases: host functions reading device-written stores run after
        // the device; the rest run before.
        let mut device_written: BTreeSet<usize> = BTreeSet::new();
        for (pe, script) in scripts.iter().enumerate() {
            if self.pes[pe].placement == Placement::Device {
                for s in &script.steps {
                    let copies: &[EmitCopy] = match s {
                        Step::Compute(c) => &c.emit,
                        Step::ChainForward { emit, .. } => emit,
                        Step::FlushDyn { copies } => copies,
                        _ => &[],
                    };
                    for c in copies {
                        if let EmitCopy::MemWrite { store, .. } = c {
                            device_written.insert(*store);
                        }
                    }
                }
            }
        }
        let mut host_pre = Vec::new();
        let mut host_post = Vec::new();
        for (pe, script) in scripts.iter().enumerate() {
            if self.pes[pe].placement != Placement::Host {
                continue;
            }
            let mut post = false;
            for s in &script.steps {
                let route = match s {
                    Step::Read { route, .. } => Some(route),
                    Step::ChainForward { route, .. } => Some(route),
                    _ => None,
                };
                if let Some(ReadRoute::Mem { store, .. }) = route {
                    if device_written.contains(store) {
                        post = true;
                    }
                }
            }
            if post {
                host_post.push(pe);
            } else {
                host_pre.push(pe);
            }
        }
        let mut store_regions = BTreeMap::new();
        for f in &self.sp.program.funcs {
            if let Some(region) = &f.store_region {
                let env = BTreeMap::new();
                let mut pt = Vec::new();
                for e in region {
                    pt.push(self.eval_i64(e, &env)?);
                }
                store_regions.insert(f.name.clone(), pt);
            }
        }
        let host_funcs: Vec<String> = self
            .sp
            .program
            .funcs
            .iter()
            .filter(|f| f.placement == Placement::Host)
            .map(|f| f.name.clone())
            .collect();
        Ok(SpatialGraph {
            pes: self.pes,
            channels: self.channels,
            host_funcs,
            mem_stores: self.stores,
            scripts,
            binding: self.binding.clone(),
            store_regions,
            host_pre,
            host_post,
        })
    }

    fn assemble_extern(&mut self, pe: usize) -> Result<Script, LayoutError> {
        let func = self.pes[pe].func.clone();
        let sig = self.sp.program.extern_sig(&func).unwrap().clone();
        let in_map = self.extern_in_chans.get(&pe).cloned().unwrap_or_default();
        let mut in_chans = Vec::new();
        for (expect, (&port, &chan)) in in_map.iter().enumerate() {
            if port != expect {
                return Err(LayoutError::SignatureMismatch {
                    func: func.clone(),
                    message: format!("input port {expect} of `{func}` is not wired"),
                });
            }
            in_chans.push(chan);
        }
        let mut out_chans = Vec::new();
        if let Some(groups) = self.extern_out_groups.get(&pe) {
            for ports in groups.values() {
                let n = ports.len();
                for want in 0..n {
                    let &chan = ports
                        .get(&want)
                        .ok_or_else(|| LayoutError::SignatureMismatch {
                            func: func.clone(),
                            message: format!("output slot {want} of `{func}` is never consumed"),
                        })?;
                    out_chans.push(chan);
                }
            }
        }
        // The function's own output ports come last.
        let own: Vec<(usize, usize)> = self
            .extern_out_ports
            .iter()
            .filter(|((p, _), _)| *p == pe)
            .map(|((_, port), &c)| (*port, c))
            .collect();
        let mut own_sorted = own;
        own_sorted.sort_by_key(|(p, _)| *p);
        for (expect, (port, chan)) in own_sorted.iter().enumerate() {
            if *port != expect {
                return Err(LayoutError::SignatureMismatch {
                    func: func.clone(),
                    message: format!("output slot {expect} of `{func}` is never consumed"),
                });
            }
            out_chans.push(*chan);
        }
        self.validate_sig(pe, &func, &sig, &in_chans, &out_chans)?;
        Ok(Script {
            steps: Vec::new(),
            buffers: Vec::new(),
            forwards: Vec::new(),
            out_chans: out_chans.clone(),
            extern_ports: Some(ExternPorts {
                impl_name: sig.impl_name.clone(),
                in_chans,
                out_chans,
                explicit: self.extern_explicit.get(&pe).cloned().unwrap_or_default(),
            }),
            extern_sink_port: self.extern_sink_port.get(&pe).copied(),
            slots: 0,
        })
    }

    /// The implicit channel parameters must line up with the channels the
    /// compiler created, in creation order, kinds included.
    fn validate_sig(
        &self,
        pe: usize,
        func: &str,
        sig: &crate::externs::ExternSig,
        in_chans: &[usize],
        out_chans: &[usize],
    ) -> Result<(), LayoutError> {
        let mismatch = |m: String| LayoutError::SignatureMismatch {
            func: func.to_string(),
            message: m,
        };
        let flat: Vec<usize> = in_chans.iter().chain(out_chans.iter()).copied().collect();
        let mut cursor = 0usize;
        for p in sig.channels() {
            let SigParam::Channel { name, elem, array } = p else {
                unreachable!()
            };
            let take = if *array {
                self.registry
                    .array_size(&sig.impl_name, self.binding)
                    .map_err(|m| mismatch(format!("`{name}`: {m}")))?
            } else {
                1
            };
            if cursor + take > flat.len() {
                return Err(mismatch(format!(
                    "`{name}` needs {take} channel(s) but only {} remain",
                    flat.len() - cursor
                )));
            }
            for &c in &flat[cursor..cursor + take] {
                let v = &self.channels[c].value;
                if let Some(param) = self.sp.program.param(v) {
                    if param.elem_type != *elem {
                        return Err(mismatch(format!(
                            "`{name}` is declared {} but carries {} values of `{v}`",
                            elem, param.elem_type
                        )));
                    }
                }
            }
            cursor += take;
        }
        if cursor != flat.len() {
            return Err(mismatch(format!(
                "{} channel(s) created beyond the declared parameters",
                flat.len() - cursor
            )));
        }
        // Explicit parameter counts.
        let explicit = self.extern_explicit.get(&pe).cloned().unwrap_or_default();
        let declared = sig.explicit().len();
        if declared != explicit.len() {
            return Err(mismatch(format!(
                "{declared} explicit parameters declared, {} provided",
                explicit.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ChainUpstream {
    /// Register hop from the previous chain function.
    Prev,
    /// Memory hop: the previous (host-side) function writes a store.
    MemoryHop { store: usize, hop: usize },
    /// First function loads the parameter from host memory.
    ParamSource,
    /// First function re-supplies its own function's drained values.
    SelfStore,
}
