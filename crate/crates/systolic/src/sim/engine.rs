//! The discrete-event engine: a seeded round-robin scheduler over PEs, each
//! fire performing one bounded action. Values are deterministic across
//! scheduling orders because every PE reads fixed channels in script order;
//! only trace statistics vary with the seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{EvalError, SimError};
use crate::externs::{ExternBuildCtx, ExternIo, ExternPe, Progress, ReadOutcome, Registry};
use crate::ir::expr::{eval, EvalContext};
use crate::ir::Placement;
use crate::layout::{
    Channel, ChannelKind, ComputeSpec, EmitCopy, Endpoint, ExternArg, FillSrc, LhsSpec, ReadRoute,
    SpatialGraph, Step,
};
use crate::value::{scalar_add, Binding, Scalar};

use super::{
    assemble_outputs, BlockKind, BlockedPe, BufferStats, ChannelStats, DeadlockReport, OutputAcc,
    RunConfig, RunOutputs, Trace, TraceEvent,
};

#[derive(Debug, Clone)]
enum Payload {
    S(Scalar),
    V(Vec<Scalar>),
}

#[derive(Debug, Clone)]
struct Token {
    payload: Payload,
    dest: Option<Vec<i64>>,
    /// Element tags, parallel to the payload lanes.
    elems: Option<Vec<Vec<i64>>>,
}

struct ChanRt {
    q: VecDeque<Token>,
    eos: bool,
    cap: Option<usize>,
    width: usize,
    /// Producer-side lane accumulation for vector channels.
    pending: Vec<(Option<Vec<i64>>, Scalar, Option<Vec<i64>>)>,
    stats: ChannelStats,
    next_seq: u64,
    sink: bool,
}

impl ChanRt {
    fn can_push(&self) -> bool {
        self.sink || self.cap.map(|c| self.q.len() < c).unwrap_or(true)
    }

    fn push_scalar(&mut self, v: Scalar, dest: Option<Vec<i64>>, elem: Option<Vec<i64>>) {
        if self.width <= 1 {
            self.enqueue(Payload::S(v), dest, elem.map(|e| vec![e]));
            return;
        }
        self.pending.push((dest, v, elem));
        if self.pending.len() == self.width {
            self.flush_pending();
        }
    }

    fn flush_pending(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let dest = self.pending[0].0.clone();
        let vals: Vec<Scalar> = self.pending.iter().map(|(_, v, _)| *v).collect();
        let elems: Option<Vec<Vec<i64>>> = self
            .pending
            .iter()
            .map(|(_, _, e)| e.clone())
            .collect::<Option<Vec<_>>>();
        self.pending.clear();
        if vals.len() == 1 {
            self.enqueue(Payload::S(vals[0]), dest, elems);
        } else {
            self.enqueue(Payload::V(vals), dest, elems);
        }
    }

    fn enqueue(&mut self, payload: Payload, dest: Option<Vec<i64>>, elems: Option<Vec<Vec<i64>>>) {
        self.next_seq += 1;
        self.q.push_back(Token {
            payload,
            dest,
            elems,
        });
        self.stats.total_tokens += 1;
        self.stats.max_occupancy = self.stats.max_occupancy.max(self.q.len());
    }
}

struct MemStoreRt {
    map: BTreeMap<Vec<i64>, Scalar>,
}

#[derive(Debug, Clone)]
struct BufRt {
    map: BTreeMap<Vec<i64>, Scalar>,
    stats: BufferStats,
}

#[derive(Debug)]
enum FireResult {
    Progressed,
    Blocked(Option<(usize, BlockKind)>),
    Finished,
}

struct PeRt {
    pc: usize,
    sub: usize,
    has_updates: bool,
    has_pure: bool,
    slots: Vec<Scalar>,
    pools: BTreeMap<usize, BTreeMap<Vec<i64>, Scalar>>,
    streams: BTreeMap<usize, VecDeque<Scalar>>,
    own: BTreeMap<String, BTreeMap<Vec<i64>, Scalar>>,
    accum: BTreeMap<Vec<i64>, Scalar>,
    bufs: Vec<BufRt>,
    ext: Option<Box<dyn ExternPe>>,
    script_done: bool,
    finished: bool,
    fires: u64,
    flush_keys: Vec<Vec<i64>>,
}

pub(super) struct Engine<'a> {
    graph: &'a SpatialGraph,
    registry: &'a Registry,
    config: &'a RunConfig,
    chans: Vec<ChanRt>,
    stores: Vec<MemStoreRt>,
    pes: Vec<PeRt>,
    outputs: BTreeMap<String, OutputAcc>,
    steps: u64,
    order: Vec<usize>,
    events: Vec<TraceEvent>,
    /// Who can still write each channel: end-of-stream is declared once all
    /// contributors are done.
    contribs: Vec<Vec<Contrib>>,
    rule_done: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Contrib {
    Script(usize),
    Rule(usize, usize),
}

struct SlotCtx<'a> {
    env: &'a BTreeMap<String, i64>,
    slots: &'a [Scalar],
    binding: &'a Binding,
    registry: &'a Registry,
}

impl<'a> EvalContext for SlotCtx<'a> {
    fn var(&self, name: &str) -> Option<Scalar> {
        if let Some(rest) = name.strip_prefix("$s") {
            let idx: usize = rest.parse().ok()?;
            return self.slots.get(idx).copied();
        }
        if let Some(v) = self.env.get(name) {
            return Some(Scalar::Int(*v));
        }
        self.binding.scalar(name)
    }

    fn param_elem(&mut self, name: &str, _idx: &[i64]) -> Result<Scalar, EvalError> {
        self.binding
            .scalar(name)
            .ok_or_else(|| EvalError::UnknownName(name.to_string()))
    }

    fn func_elem(&mut self, name: &str, _idx: &[i64]) -> Result<Scalar, EvalError> {
        Err(EvalError::UnknownName(name.to_string()))
    }

    fn call(&mut self, name: &str, args: &[Scalar]) -> Result<Scalar, EvalError> {
        match self.registry.pure_fn(name) {
            Some(f) => f(args),
            None => Err(EvalError::UnboundExtern(name.to_string())),
        }
    }
}

impl<'a> Engine<'a> {
    pub(super) fn new(
        graph: &'a SpatialGraph,
        registry: &'a Registry,
        config: &'a RunConfig,
    ) -> Result<Engine<'a>, SimError> {
        let chans = graph
            .channels
            .iter()
            .map(|c: &Channel| ChanRt {
                q: VecDeque::new(),
                eos: false,
                cap: if c.kind == ChannelKind::Register {
                    c.depth
                } else {
                    None
                },
                width: c.width.max(1),
                pending: Vec::new(),
                stats: ChannelStats::default(),
                next_seq: 0,
                sink: matches!(c.dst, Endpoint::Host(_)),
            })
            .collect();
        let mut stores = Vec::new();
        for spec in &graph.mem_stores {
            let mut map = BTreeMap::new();
            if let Some(param) = &spec.prefill {
                let t = graph.binding.tensor(param).ok_or_else(|| {
                    SimError::Fault(format!("parameter `{param}` is not bound to a tensor"))
                })?;
                let mut idx = vec![0i64; t.rank()];
                fill_store(t, &mut idx, 0, &mut map);
            }
            stores.push(MemStoreRt { map });
        }
        let mut pes = Vec::new();
        for (i, pe) in graph.pes.iter().enumerate() {
            let script = &graph.scripts[i];
            let ext = match &script.extern_ports {
                Some(ports) => {
                    let mut explicit = Vec::new();
                    for a in &ports.explicit {
                        match a {
                            ExternArg::Int(v) => {
                                explicit.push(crate::externs::ArgValue::Scalar(Scalar::Int(*v)))
                            }
                            ExternArg::Param(p) => {
                                let t = graph.binding.tensor(p).ok_or_else(|| {
                                    SimError::Fault(format!("`{p}` is not bound to a tensor"))
                                })?;
                                explicit.push(crate::externs::ArgValue::Tensor(t.clone()));
                            }
                        }
                    }
                    let ctx = ExternBuildCtx {
                        binding: &graph.binding,
                        explicit,
                        in_ports: ports.in_chans.len(),
                        out_ports: ports.out_chans.len(),
                    };
                    let inst = registry
                        .sim_instance(&ports.impl_name, &ctx)
                        .ok_or_else(|| SimError::ExternFault {
                            name: ports.impl_name.clone(),
                            message: "no simulator implementation registered".to_string(),
                        })?
                        .map_err(|m| SimError::ExternFault {
                            name: ports.impl_name.clone(),
                            message: m,
                        })?;
                    Some(inst)
                }
                None => None,
            };
            let bufs = script
                .buffers
                .iter()
                .map(|b| BufRt {
                    map: BTreeMap::new(),
                    stats: BufferStats {
                        value: b.value.clone(),
                        level: b.level.clone(),
                        line: b.line,
                        fills: 0,
                        reads: 0,
                        capacity: 0,
                    },
                })
                .collect();
            let has_updates = script
                .steps
                .iter()
                .any(|s| matches!(s, Step::Compute(c) if c.is_update));
            let has_pure = script
                .steps
                .iter()
                .any(|s| matches!(s, Step::Compute(c) if !c.is_update));
            pes.push(PeRt {
                pc: 0,
                sub: 0,
                has_updates,
                has_pure,
                slots: vec![Scalar::Int(0); script.slots],
                pools: BTreeMap::new(),
                streams: BTreeMap::new(),
                own: BTreeMap::new(),
                accum: BTreeMap::new(),
                bufs,
                ext,
                script_done: false,
                finished: false,
                fires: 0,
                flush_keys: Vec::new(),
            });
            let _ = pe;
        }
        let mut order: Vec<usize> = (0..graph.pes.len())
            .filter(|&i| graph.pes[i].placement == Placement::Device)
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        order.shuffle(&mut rng);
        let mut contribs: Vec<Vec<Contrib>> = vec![Vec::new(); graph.channels.len()];
        let mut rule_done = Vec::new();
        for (pe, script) in graph.scripts.iter().enumerate() {
            let mut mark = |c: usize| {
                if !contribs[c].contains(&Contrib::Script(pe)) {
                    contribs[c].push(Contrib::Script(pe));
                }
            };
            for s in &script.steps {
                let copies: &[EmitCopy] = match s {
                    Step::Compute(c) => &c.emit,
                    Step::ChainForward { emit, .. } => emit,
                    Step::FlushDyn { copies } => copies,
                    _ => &[],
                };
                for c in copies {
                    if let EmitCopy::Chan { chan, .. } = c {
                        mark(*chan);
                    }
                }
            }
            if let Some(ports) = &script.extern_ports {
                for &c in &ports.out_chans {
                    mark(c);
                }
            }
            for (ri, r) in script.forwards.iter().enumerate() {
                if let Some(out) = r.out_chan {
                    contribs[out].push(Contrib::Rule(pe, ri));
                }
            }
            rule_done.push(vec![false; script.forwards.len()]);
        }
        Ok(Engine {
            graph,
            registry,
            config,
            chans,
            stores,
            pes,
            outputs: BTreeMap::new(),
            steps: 0,
            order,
            events: Vec::new(),
            contribs,
            rule_done,
        })
    }

    /// Declare end-of-stream on channels whose writers are all done.
    fn propagate_eos(&mut self, pe: usize) {
        let script = &self.graph.scripts[pe];
        for (ri, r) in script.forwards.iter().enumerate() {
            if self.rule_done[pe][ri] {
                continue;
            }
            if self.chans[r.in_chan].eos && self.chans[r.in_chan].q.is_empty() {
                self.rule_done[pe][ri] = true;
            }
        }
        if !self.pes[pe].script_done {
            return;
        }
        for c in 0..self.chans.len() {
            if self.chans[c].eos {
                continue;
            }
            let all_done = !self.contribs[c].is_empty()
                && self.contribs[c].iter().all(|k| match k {
                    Contrib::Script(p) => self.pes[*p].script_done,
                    Contrib::Rule(p, ri) => self.rule_done[*p][*ri],
                });
            let involves_me = self.contribs[c].iter().any(|k| match k {
                Contrib::Script(p) | Contrib::Rule(p, _) => *p == pe,
            });
            if all_done && involves_me {
                self.chans[c].flush_pending();
                self.chans[c].eos = true;
            }
        }
    }

    pub(super) fn run(mut self) -> Result<(RunOutputs, Trace), SimError> {
        // Host serialization pass.
        for &pe in &self.graph.host_pre {
            self.run_host(pe)?;
        }
        // Device event loop.
        loop {
            let mut progressed = false;
            let mut all_done = true;
            let order = self.order.clone();
            for pe in order {
                if self.pes[pe].finished {
                    continue;
                }
                all_done = false;
                match self.fire(pe)? {
                    FireResult::Progressed => {
                        progressed = true;
                        self.steps += 1;
                        if self.steps > self.config.max_steps {
                            return Err(SimError::StepLimitExceeded(self.config.max_steps));
                        }
                    }
                    FireResult::Finished => {
                        progressed = true;
                    }
                    FireResult::Blocked(_) => {}
                }
            }
            if all_done {
                break;
            }
            if !progressed {
                let report = self.deadlock_report()?;
                return Err(SimError::Deadlock(report));
            }
        }
        // Quiescence: channels must hold no real tokens.
        for (i, c) in self.chans.iter().enumerate() {
            if !c.q.is_empty() && !c.sink {
                return Err(SimError::Fault(format!(
                    "{} token(s) left on channel {i} ({})",
                    c.q.len(),
                    self.chan_desc(i)
                )));
            }
        }
        // Host de-serialization pass.
        for &pe in &self.graph.host_post {
            self.run_host(pe)?;
        }
        let outputs = assemble_outputs(self.graph, &self.outputs);
        let trace = Trace {
            channels: self.chans.iter().map(|c| c.stats.clone()).collect(),
            pe_fires: self.pes.iter().map(|p| p.fires).collect(),
            pe_labels: self.graph.pes.iter().map(|p| p.label()).collect(),
            buffers: self
                .pes
                .iter()
                .map(|p| p.bufs.iter().map(|b| b.stats.clone()).collect())
                .collect(),
            steps: self.steps,
            deadlock: None,
            events: self.events,
        };
        Ok((outputs, trace))
    }

    fn chan_desc(&self, c: usize) -> String {
        let ch = &self.graph.channels[c];
        let (s, d) = self.graph.channel_endpoint_funcs(ch);
        format!("{}: {s} -> {d}", ch.value)
    }

    fn run_host(&mut self, pe: usize) -> Result<(), SimError> {
        let mut guard = 0u64;
        loop {
            match self.fire(pe)? {
                FireResult::Progressed => {
                    guard += 1;
                    if guard > self.config.max_steps {
                        return Err(SimError::StepLimitExceeded(self.config.max_steps));
                    }
                }
                FireResult::Finished => return Ok(()),
                FireResult::Blocked(_) => {
                    return Err(SimError::Fault(format!(
                        "host function `{}` blocked on a channel",
                        self.graph.pes[pe].func
                    )))
                }
            }
        }
    }

    // -- Firing ---------------------------------------------------------------

    fn fire(&mut self, pe: usize) -> Result<FireResult, SimError> {
        if self.pes[pe].finished {
            return Ok(FireResult::Finished);
        }
        if self.pes[pe].ext.is_some() {
            return self.fire_extern(pe);
        }
        let script = &self.graph.scripts[pe];
        if self.pes[pe].pc >= script.steps.len() {
            return self.drain_phase(pe);
        }
        let step = script.steps[self.pes[pe].pc].clone();
        let r = self.exec_step(pe, &step)?;
        match r {
            FireResult::Blocked(info) => {
                // While blocked, keep pass-through traffic moving.
                if self.eager_forward(pe)? {
                    self.pes[pe].fires += 1;
                    return Ok(FireResult::Progressed);
                }
                Ok(FireResult::Blocked(info))
            }
            other => Ok(other),
        }
    }

    fn exec_step(&mut self, pe: usize, step: &Step) -> Result<FireResult, SimError> {
        match step {
            Step::Read { slot, route } => {
                let func = self.graph.pes[pe].func.clone();
                match self.do_read(pe, route, &func)? {
                    ReadState::Got(v) => {
                        self.pes[pe].slots[*slot] = v;
                        self.pes[pe].pc += 1;
                        self.pes[pe].fires += 1;
                        Ok(FireResult::Progressed)
                    }
                    ReadState::Progress => {
                        self.pes[pe].fires += 1;
                        Ok(FireResult::Progressed)
                    }
                    ReadState::Blocked(info) => Ok(FireResult::Blocked(info)),
                }
            }
            Step::Fill { buf, items } => {
                let sub = self.pes[pe].sub;
                if sub >= items.len() {
                    self.pes[pe].sub = 0;
                    self.pes[pe].pc += 1;
                    return Ok(FireResult::Progressed);
                }
                let item = &items[sub];
                let got = match &item.src {
                    FillSrc::ChanKeyed { chan } => match self.keyed_read(pe, *chan, &item.elem)? {
                        ReadState::Got(v) => Some(v),
                        ReadState::Progress => {
                            self.pes[pe].fires += 1;
                            return Ok(FireResult::Progressed);
                        }
                        ReadState::Blocked(info) => return Ok(FireResult::Blocked(info)),
                    },
                    FillSrc::Mem { store, chan } => {
                        let v = self.mem_read(*store, &item.elem)?;
                        if *chan != usize::MAX {
                            self.chans[*chan].stats.total_tokens += 1;
                        }
                        Some(v)
                    }
                    FillSrc::Parent { buf: p } => {
                        let v = self.pes[pe].bufs[*p]
                            .map
                            .get(&item.elem)
                            .copied()
                            .ok_or_else(|| {
                                SimError::Fault(format!(
                                    "buffer miss filling from parent at {:?}",
                                    item.elem
                                ))
                            })?;
                        self.pes[pe].bufs[*p].stats.reads += 1;
                        Some(v)
                    }
                };
                if let Some(v) = got {
                    let b = &mut self.pes[pe].bufs[*buf];
                    b.map.insert(item.elem.clone(), v);
                    b.stats.fills += 1;
                    b.stats.capacity = b.stats.capacity.max(b.map.len());
                    self.pes[pe].sub += 1;
                    if self.pes[pe].sub >= items.len() {
                        self.pes[pe].sub = 0;
                        self.pes[pe].pc += 1;
                    }
                    self.pes[pe].fires += 1;
                    Ok(FireResult::Progressed)
                } else {
                    unreachable!()
                }
            }
            Step::Compute(spec) => self.exec_compute(pe, spec),
            Step::ChainForward {
                value,
                elem,
                route,
                emit,
            } => {
                if self.pes[pe].sub == 0 {
                    match self.do_read(pe, route, value)? {
                        ReadState::Got(v) => {
                            self.pes[pe]
                                .own
                                .entry(value.clone())
                                .or_default()
                                .insert(elem.clone(), v);
                            self.pes[pe].sub = 1;
                            self.pes[pe].fires += 1;
                            return Ok(FireResult::Progressed);
                        }
                        ReadState::Progress => {
                            self.pes[pe].fires += 1;
                            return Ok(FireResult::Progressed);
                        }
                        ReadState::Blocked(info) => return Ok(FireResult::Blocked(info)),
                    }
                }
                // Emission phase: all copies go out atomically.
                if let Some(info) = self.emit_blocked(emit) {
                    return Ok(FireResult::Blocked(Some(info)));
                }
                let v = self.pes[pe].own[value][elem];
                self.do_emit(pe, value, Some(elem.clone()), v, emit)?;
                self.pes[pe].sub = 0;
                self.pes[pe].pc += 1;
                self.pes[pe].fires += 1;
                Ok(FireResult::Progressed)
            }
            Step::FlushDyn { copies } => {
                if self.pes[pe].sub == 0 {
                    self.pes[pe].flush_keys = self.pes[pe].accum.keys().cloned().collect();
                }
                let sub = self.pes[pe].sub;
                if sub >= self.pes[pe].flush_keys.len() {
                    self.pes[pe].sub = 0;
                    self.pes[pe].pc += 1;
                    return Ok(FireResult::Progressed);
                }
                if let Some(info) = self.emit_blocked(copies) {
                    return Ok(FireResult::Blocked(Some(info)));
                }
                let elem = self.pes[pe].flush_keys[sub].clone();
                let v = self.pes[pe].accum[&elem];
                let func = self.graph.pes[pe].func.clone();
                self.do_emit(pe, &func, Some(elem), v, copies)?;
                self.pes[pe].sub += 1;
                if self.pes[pe].sub >= self.pes[pe].flush_keys.len() {
                    self.pes[pe].sub = 0;
                    self.pes[pe].pc += 1;
                }
                self.pes[pe].fires += 1;
                Ok(FireResult::Progressed)
            }
        }
    }

    fn exec_compute(&mut self, pe: usize, spec: &ComputeSpec) -> Result<FireResult, SimError> {
        if spec.emit_elem.is_some() || !spec.emit.is_empty() {
            if let Some(info) = self.emit_blocked(&spec.emit) {
                return Ok(FireResult::Blocked(Some(info)));
            }
        }
        let env: BTreeMap<String, i64> = spec.env.iter().cloned().collect();
        let mut ctx = SlotCtx {
            env: &env,
            slots: &self.pes[pe].slots,
            binding: &self.graph.binding,
            registry: self.registry,
        };
        let v = eval(&spec.rhs, &mut ctx).map_err(SimError::Eval)?;
        let elem = match &spec.lhs {
            LhsSpec::Static(e) => e.clone(),
            LhsSpec::Dynamic(exprs) => {
                let mut idx = Vec::new();
                for e in exprs {
                    idx.push(
                        eval(e, &mut ctx)
                            .map_err(SimError::Eval)?
                            .as_index()
                            .map_err(SimError::Eval)?,
                    );
                }
                idx
            }
        };
        let func = self.graph.pes[pe].func.clone();
        let func_has_updates = self.pes[pe].has_updates;
        let out_val;
        if spec.is_update {
            let cur = match self.pes[pe].accum.get(&elem) {
                Some(c) => *c,
                None => {
                    if self.pes[pe].has_pure {
                        return Err(SimError::Fault(format!(
                            "update of {func}{elem:?} before initialization"
                        )));
                    }
                    Scalar::zero(v.elem_type())
                }
            };
            let nv = scalar_add(cur, v);
            self.pes[pe].accum.insert(elem.clone(), nv);
            out_val = nv;
        } else if func_has_updates {
            self.pes[pe].accum.insert(elem.clone(), v);
            out_val = v;
        } else {
            self.pes[pe]
                .own
                .entry(func.clone())
                .or_default()
                .insert(elem.clone(), v);
            out_val = v;
        }
        if spec.emit_elem.is_some() || (!spec.emit.is_empty() && !spec.is_update) {
            let emit_elem = spec.emit_elem.clone().unwrap_or(elem);
            let final_v = if spec.is_update || func_has_updates {
                *self.pes[pe].accum.get(&emit_elem).unwrap_or(&out_val)
            } else {
                out_val
            };
            self.do_emit(pe, &func, Some(emit_elem), final_v, &spec.emit)?;
        }
        self.pes[pe].pc += 1;
        self.pes[pe].fires += 1;
        Ok(FireResult::Progressed)
    }

    fn emit_blocked(&self, copies: &[EmitCopy]) -> Option<(usize, BlockKind)> {
        for c in copies {
            if let EmitCopy::Chan { chan, .. } = c {
                if !self.chans[*chan].can_push() {
                    return Some((*chan, BlockKind::FullOutput));
                }
            }
        }
        None
    }

    fn do_emit(
        &mut self,
        pe: usize,
        value: &str,
        elem: Option<Vec<i64>>,
        v: Scalar,
        copies: &[EmitCopy],
    ) -> Result<(), SimError> {
        let _ = pe;
        for c in copies {
            match c {
                EmitCopy::Chan { chan, dest } => {
                    let ch = &mut self.chans[*chan];
                    if ch.sink {
                        let acc = self.outputs.entry(value.to_string()).or_default();
                        match &elem {
                            Some(e) => {
                                acc.map.insert(e.clone(), v);
                            }
                            None => acc.seq.push(v),
                        }
                        ch.stats.total_tokens += 1;
                        continue;
                    }
                    ch.push_scalar(v, dest.clone(), elem.clone());
                    if self.config.record_trace {
                        self.events.push(TraceEvent {
                            step: self.steps,
                            channel: *chan,
                            seq: self.chans[*chan].next_seq,
                            payload: v.to_string(),
                        });
                    }
                }
                EmitCopy::MemWrite { store, chan } => {
                    let e = elem.clone().ok_or_else(|| {
                        SimError::Fault("memory write without an element index".to_string())
                    })?;
                    self.stores[*store].map.insert(e, v);
                    if let Some(c) = chan {
                        self.chans[*c].stats.total_tokens += 1;
                    }
                }
                EmitCopy::Sink { chan } => {
                    let acc = self.outputs.entry(value.to_string()).or_default();
                    match &elem {
                        Some(e) => {
                            acc.map.insert(e.clone(), v);
                        }
                        None => acc.seq.push(v),
                    }
                    self.chans[*chan].stats.total_tokens += 1;
                }
            }
        }
        Ok(())
    }

    // -- Reads ------------------------------------------------------------------

    fn do_read(
        &mut self,
        pe: usize,
        route: &ReadRoute,
        value: &str,
    ) -> Result<ReadState, SimError> {
        match route {
            ReadRoute::Local { elem } => {
                let v = self.pes[pe]
                    .own
                    .get(value)
                    .and_then(|m| m.get(elem))
                    .copied()
                    .ok_or_else(|| {
                        SimError::Fault(format!(
                            "{} reads {value}{elem:?} before producing it",
                            self.graph.pes[pe].label()
                        ))
                    })?;
                Ok(ReadState::Got(v))
            }
            ReadRoute::ChanKeyed { chan, elem } => self.keyed_read(pe, *chan, elem),
            ReadRoute::ChanStream { chan } => self.stream_read(pe, *chan),
            ReadRoute::Mem { store, elem, chan } => {
                let v = self.mem_read(*store, elem)?;
                if let Some(c) = chan {
                    self.chans[*c].stats.total_tokens += 1;
                }
                Ok(ReadState::Got(v))
            }
            ReadRoute::Buffer { buf, elem } => {
                let v = self.pes[pe].bufs[*buf]
                    .map
                    .get(elem)
                    .copied()
                    .ok_or_else(|| {
                        SimError::Fault(format!(
                            "buffer miss on {} for {value}{elem:?}",
                            self.graph.pes[pe].label()
                        ))
                    })?;
                self.pes[pe].bufs[*buf].stats.reads += 1;
                Ok(ReadState::Got(v))
            }
            ReadRoute::BufferDyn { buf, idx, env } => {
                let env_map: BTreeMap<String, i64> = env.iter().cloned().collect();
                let mut ctx = SlotCtx {
                    env: &env_map,
                    slots: &self.pes[pe].slots,
                    binding: &self.graph.binding,
                    registry: self.registry,
                };
                let mut elem = Vec::new();
                for e in idx {
                    elem.push(
                        eval(e, &mut ctx)
                            .map_err(SimError::Eval)?
                            .as_index()
                            .map_err(SimError::Eval)?,
                    );
                }
                let v = self.pes[pe].bufs[*buf]
                    .map
                    .get(&elem)
                    .copied()
                    .ok_or_else(|| {
                        SimError::Fault(format!(
                            "buffer miss on {} for {value}{elem:?} (data-dependent read)",
                            self.graph.pes[pe].label()
                        ))
                    })?;
                self.pes[pe].bufs[*buf].stats.reads += 1;
                Ok(ReadState::Got(v))
            }
        }
    }

    fn mem_read(&mut self, store: usize, elem: &[i64]) -> Result<Scalar, SimError> {
        self.stores[store]
            .map
            .get(elem)
            .copied()
            .ok_or_else(|| SimError::Fault(format!("memory element {elem:?} missing")))
    }

    /// One channel action toward obtaining `elem`: consume from the pool, or
    /// classify one incoming token (pool it, or forward a stranger).
    fn keyed_read(&mut self, pe: usize, chan: usize, elem: &[i64]) -> Result<ReadState, SimError> {
        if let Some(v) = self.pes[pe]
            .pools
            .get_mut(&chan)
            .and_then(|p| p.remove(elem))
        {
            return Ok(ReadState::Got(v));
        }
        let front = self.chans[chan].q.front().cloned();
        let Some(tok) = front else {
            if self.chans[chan].eos {
                return Err(SimError::Fault(format!(
                    "{} starves: {}{elem:?} never arrives on {}",
                    self.graph.pes[pe].label(),
                    self.graph.channels[chan].value,
                    self.chan_desc(chan)
                )));
            }
            return Ok(ReadState::Blocked(Some((chan, BlockKind::EmptyInput))));
        };
        let my_pos = &self.graph.pes[pe].pos;
        let fwd = self.forward_target(pe, chan);
        // Untagged destinations ride to the boundary: they are ours only when
        // no forwarding path continues past this PE.
        let mine = match &tok.dest {
            Some(d) => d == my_pos,
            None => fwd.is_none(),
        };
        if mine || fwd.is_none() {
            if !mine {
                return Err(SimError::Fault(format!(
                    "token for {:?} stranded at {}",
                    tok.dest,
                    self.graph.pes[pe].label()
                )));
            }
            self.chans[chan].q.pop_front();
            self.pool_token(pe, chan, tok)?;
            // The element may have just arrived.
            if let Some(v) = self.pes[pe]
                .pools
                .get_mut(&chan)
                .and_then(|p| p.remove(elem))
            {
                return Ok(ReadState::Got(v));
            }
            return Ok(ReadState::Progress);
        }
        // Not mine: forward one token.
        let out = fwd.unwrap();
        if !self.chans[out].can_push() {
            return Ok(ReadState::Blocked(Some((out, BlockKind::FullOutput))));
        }
        let tok = self.chans[chan].q.pop_front().unwrap();
        self.forward_token(out, tok);
        Ok(ReadState::Progress)
    }

    fn forward_token(&mut self, out: usize, tok: Token) {
        let ch = &mut self.chans[out];
        if ch.sink {
            // Boundary channel into host memory.
            let value = self.graph.channels[out].value.clone();
            let acc = self.outputs.entry(value).or_default();
            let scalars: Vec<Scalar> = match &tok.payload {
                Payload::S(v) => vec![*v],
                Payload::V(vs) => vs.clone(),
            };
            for (i, v) in scalars.iter().enumerate() {
                match tok.elems.as_ref().and_then(|e| e.get(i)) {
                    Some(e) => {
                        acc.map.insert(e.clone(), *v);
                    }
                    None => acc.seq.push(*v),
                }
            }
            ch.stats.total_tokens += 1;
            return;
        }
        ch.enqueue(tok.payload, tok.dest, tok.elems);
    }

    fn pool_token(&mut self, pe: usize, chan: usize, tok: Token) -> Result<(), SimError> {
        let pool = self.pes[pe].pools.entry(chan).or_default();
        let scalars: Vec<Scalar> = match &tok.payload {
            Payload::S(v) => vec![*v],
            Payload::V(vs) => vs.clone(),
        };
        let Some(elems) = &tok.elems else {
            return Err(SimError::Fault(format!(
                "untagged token on keyed channel {}",
                self.chan_desc(chan)
            )));
        };
        if elems.len() != scalars.len() {
            return Err(SimError::Fault("token lane/tag mismatch".to_string()));
        }
        for (e, v) in elems.iter().zip(scalars) {
            pool.insert(e.clone(), v);
        }
        Ok(())
    }

    fn stream_read(&mut self, pe: usize, chan: usize) -> Result<ReadState, SimError> {
        if let Some(v) = self.pes[pe]
            .streams
            .get_mut(&chan)
            .and_then(|q| q.pop_front())
        {
            return Ok(ReadState::Got(v));
        }
        let Some(tok) = self.chans[chan].q.pop_front() else {
            if self.chans[chan].eos {
                return Err(SimError::Fault(format!(
                    "{} starves on stream {}",
                    self.graph.pes[pe].label(),
                    self.chan_desc(chan)
                )));
            }
            return Ok(ReadState::Blocked(Some((chan, BlockKind::EmptyInput))));
        };
        let q = self.pes[pe].streams.entry(chan).or_default();
        match tok.payload {
            Payload::S(v) => q.push_back(v),
            Payload::V(vs) => q.extend(vs),
        }
        let v = self.pes[pe]
            .streams
            .get_mut(&chan)
            .unwrap()
            .pop_front()
            .unwrap();
        Ok(ReadState::Got(v))
    }

    fn forward_target(&self, pe: usize, in_chan: usize) -> Option<usize> {
        self.graph.scripts[pe]
            .forwards
            .iter()
            .find(|r| r.in_chan == in_chan)
            .and_then(|r| r.out_chan)
    }

    /// When the scripted step is blocked, keep one stranger moving so relay
    /// traffic is never wedged behind local work.
    fn eager_forward(&mut self, pe: usize) -> Result<bool, SimError> {
        let rules = self.graph.scripts[pe].forwards.clone();
        for r in rules {
            let Some(out) = r.out_chan else { continue };
            let Some(tok) = self.chans[r.in_chan].q.front() else {
                continue;
            };
            let mine = match &tok.dest {
                Some(d) => d == &self.graph.pes[pe].pos,
                None => false,
            };
            if mine {
                continue;
            }
            if !self.chans[out].can_push() {
                continue;
            }
            let tok = self.chans[r.in_chan].q.pop_front().unwrap();
            self.forward_token(out, tok);
            return Ok(true);
        }
        Ok(false)
    }

    /// After the script: forward leftover relay traffic until upstream ends,
    /// then close the output side. End-of-stream travels per channel as its
    /// writers finish, so boundary PEs do not wait on each other in cycles.
    fn drain_phase(&mut self, pe: usize) -> Result<FireResult, SimError> {
        if !self.pes[pe].script_done {
            self.pes[pe].script_done = true;
        }
        self.propagate_eos(pe);
        let rules = self.graph.scripts[pe].forwards.clone();
        let mut waiting = false;
        for r in &rules {
            if let Some(tok) = self.chans[r.in_chan].q.front().cloned() {
                let mine = match &tok.dest {
                    Some(d) => d == &self.graph.pes[pe].pos,
                    None => r.out_chan.is_none(),
                };
                if mine {
                    return Err(SimError::Fault(format!(
                        "token for {} arrived after its script finished",
                        self.graph.pes[pe].label()
                    )));
                }
                let Some(out) = r.out_chan else {
                    return Err(SimError::Fault(format!(
                        "token stranded at boundary {}",
                        self.graph.pes[pe].label()
                    )));
                };
                if !self.chans[out].can_push() {
                    waiting = true;
                    continue;
                }
                self.chans[r.in_chan].q.pop_front();
                self.forward_token(out, tok);
                self.pes[pe].fires += 1;
                return Ok(FireResult::Progressed);
            }
            if !self.chans[r.in_chan].eos {
                waiting = true;
            }
        }
        if waiting {
            return Ok(FireResult::Blocked(None));
        }
        // Everything upstream closed: leftover pooled tokens are a fault.
        let leftover: usize = self.pes[pe].pools.values().map(|p| p.len()).sum();
        if leftover > 0 {
            return Err(SimError::Fault(format!(
                "{} finished with {leftover} unconsumed token(s)",
                self.graph.pes[pe].label()
            )));
        }
        self.propagate_eos(pe);
        self.pes[pe].finished = true;
        Ok(FireResult::Finished)
    }

    // -- Externs ------------------------------------------------------------------

    fn fire_extern(&mut self, pe: usize) -> Result<FireResult, SimError> {
        let ports = self.graph.scripts[pe].extern_ports.clone().unwrap();
        let mut ext = self.pes[pe].ext.take().unwrap();
        let mut io = EngineIo {
            engine: self,
            pe,
            in_chans: &ports.in_chans,
            out_chans: &ports.out_chans,
        };
        let r = ext.fire(&mut io);
        self.pes[pe].ext = Some(ext);
        match r {
            Ok(Progress::Progressed) => {
                self.pes[pe].fires += 1;
                Ok(FireResult::Progressed)
            }
            Ok(Progress::Blocked) => Ok(FireResult::Blocked(None)),
            Ok(Progress::Finished) => {
                for c in &ports.out_chans {
                    self.chans[*c].flush_pending();
                    self.chans[*c].eos = true;
                }
                self.pes[pe].script_done = true;
                self.pes[pe].finished = true;
                Ok(FireResult::Finished)
            }
            Err(m) => Err(SimError::ExternFault {
                name: ports.impl_name.clone(),
                message: m,
            }),
        }
    }

    // -- Deadlock ---------------------------------------------------------------

    fn deadlock_report(&mut self) -> Result<DeadlockReport, SimError> {
        let mut blocked = Vec::new();
        let mut waits: BTreeMap<usize, usize> = BTreeMap::new();
        let order = self.order.clone();
        for pe in order {
            if self.pes[pe].finished {
                continue;
            }
            let info = match self.fire(pe) {
                Ok(FireResult::Blocked(info)) => info,
                _ => None,
            };
            if let Some((chan, kind)) = info {
                let other = match kind {
                    BlockKind::EmptyInput => match self.graph.channels[chan].src {
                        Endpoint::Pe(p) => Some(p),
                        Endpoint::Host(_) => None,
                    },
                    BlockKind::FullOutput => match self.graph.channels[chan].dst {
                        Endpoint::Pe(p) => Some(p),
                        Endpoint::Host(_) => None,
                    },
                };
                if let Some(o) = other {
                    waits.insert(pe, o);
                }
                blocked.push(BlockedPe {
                    pe: self.graph.pes[pe].label(),
                    channel: chan,
                    channel_desc: self.chan_desc(chan),
                    kind,
                });
            } else {
                blocked.push(BlockedPe {
                    pe: self.graph.pes[pe].label(),
                    channel: usize::MAX,
                    channel_desc: "(internal)".to_string(),
                    kind: BlockKind::EmptyInput,
                });
            }
        }
        // Find a cycle in the wait-for map.
        let mut cycle = Vec::new();
        'outer: for &start in waits.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = start;
            while let Some(&next) = waits.get(&cur) {
                if !seen.insert(cur) {
                    // Walk again to collect the cycle.
                    let mut c = vec![cur];
                    let mut x = waits[&cur];
                    while x != cur {
                        c.push(x);
                        x = waits[&x];
                    }
                    cycle = c.into_iter().map(|p| self.graph.pes[p].label()).collect();
                    break 'outer;
                }
                cur = next;
            }
        }
        Ok(DeadlockReport { blocked, cycle })
    }
}

enum ReadState {
    Got(Scalar),
    Progress,
    Blocked(Option<(usize, BlockKind)>),
}

struct EngineIo<'a, 'b> {
    engine: &'a mut Engine<'b>,
    pe: usize,
    in_chans: &'a [usize],
    out_chans: &'a [usize],
}

impl<'a, 'b> ExternIo for EngineIo<'a, 'b> {
    fn read(&mut self, port: usize) -> ReadOutcome {
        let Some(&chan) = self.in_chans.get(port) else {
            return ReadOutcome::Eos;
        };
        match self.engine.stream_read(self.pe, chan) {
            Ok(ReadState::Got(v)) => ReadOutcome::Value(v),
            Ok(_) => ReadOutcome::Empty,
            Err(_) => ReadOutcome::Eos,
        }
    }

    fn peek(&mut self, port: usize) -> ReadOutcome {
        let Some(&chan) = self.in_chans.get(port) else {
            return ReadOutcome::Eos;
        };
        if let Some(v) = self
            .engine
            .pes
            .get(self.pe)
            .and_then(|p| p.streams.get(&chan))
            .and_then(|q| q.front())
        {
            return ReadOutcome::Value(*v);
        }
        match self.engine.chans[chan].q.front() {
            Some(tok) => match &tok.payload {
                Payload::S(v) => ReadOutcome::Value(*v),
                Payload::V(vs) => ReadOutcome::Value(vs[0]),
            },
            None if self.engine.chans[chan].eos => ReadOutcome::Eos,
            None => ReadOutcome::Empty,
        }
    }

    fn can_write(&mut self, port: usize) -> bool {
        self.out_chans
            .get(port)
            .map(|&c| self.engine.chans[c].can_push())
            .unwrap_or(false)
    }

    fn write(&mut self, port: usize, v: Scalar) {
        let Some(&chan) = self.out_chans.get(port) else {
            return;
        };
        if self.engine.chans[chan].sink {
            let value = self.engine.graph.channels[chan].value.clone();
            let acc = self.engine.outputs.entry(value).or_default();
            acc.seq.push(v);
            self.engine.chans[chan].stats.total_tokens += 1;
            return;
        }
        self.engine.chans[chan].push_scalar(v, None, None);
    }

    fn in_ports(&self) -> usize {
        self.in_chans.len()
    }

    fn out_ports(&self) -> usize {
        self.out_chans.len()
    }
}

fn fill_store(
    t: &crate::value::Tensor,
    idx: &mut Vec<i64>,
    d: usize,
    map: &mut BTreeMap<Vec<i64>, Scalar>,
) {
    if d == t.rank() {
        if let Some(v) = t.get(idx) {
            map.insert(idx.clone(), v);
        }
        return;
    }
    for i in 0..t.shape[d] {
        idx[d] = t.origin[d] + i as i64;
        fill_store(t, idx, d + 1, map);
    }
}
