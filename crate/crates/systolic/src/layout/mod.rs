//! Spatial layout: isolation into producer/consumer chains, expansion of
//! unrolled loops into PE arrays, channel splitting and wiring, buffer
//! placement, and channel-depth sizing.

mod export;
mod route;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use export::{to_dot, to_json};
pub use route::{forward_read_body, forward_write_body, instantiate_pes};

use crate::error::{LayoutError, ScheduleError};
use crate::ir::expr::Expr;
use crate::ir::lower::LoopNest;
use crate::ir::{lower_to_loop_nest, Placement, Program};
use crate::schedule::{apply_loop_directive, BufferAttr, Directive, Schedule};
use crate::value::Binding;

/// Where a chain function sits relative to the value it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainKind {
    Producer,
    Consumer,
}

/// One isolation record: `target` keeps computing; the chain funcs carry
/// `value` to or from it. Chain order is as listed in the directive: the
/// first function is nearest memory, the last is adjacent to the compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isolation {
    pub kind: ChainKind,
    pub target: String,
    pub value: String,
    pub chain: Vec<String>,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferRule {
    pub value: String,
    pub level: Option<String>,
    pub attrs: Vec<BufferAttr>,
    pub line: bool,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayRule {
    pub value: String,
    pub direction: Vec<Expr>,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinDepthRule {
    pub src_func: String,
    pub value: String,
    pub dest_func: String,
    pub depth: usize,
}

/// Per-function scheduled state: the transformed nest plus recorded
/// partitioning, forwarding and caching rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuncState {
    pub name: String,
    pub placement: Placement,
    pub nest: Option<LoopNest>,
    pub relays: Vec<RelayRule>,
    pub buffers: Vec<BufferRule>,
    /// Buffer rules on the function's own output: functionally transparent,
    /// recorded for the trace.
    pub output_buffers: Vec<BufferRule>,
    /// For chain funcs: which isolation created this function.
    pub chain_of: Option<(usize, usize)>, // (isolation seq, position in chain)
}

/// A program with its schedule fully applied: the input to instantiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledProgram {
    pub program: Program,
    pub funcs: BTreeMap<String, FuncState>,
    pub isolations: Vec<Isolation>,
    pub min_depths: Vec<MinDepthRule>,
    /// Unrolled loop names per func, in directive order: the PE id dims.
    pub unroll_dims: BTreeMap<String, Vec<String>>,
}

impl ScheduledProgram {
    /// Apply every directive in order. Temporal chain-forms (set_bounds,
    /// store, define_extern) mutate the program before lowering.
    pub fn build(program: &Program, schedule: &Schedule) -> Result<ScheduledProgram, LayoutError> {
        let mut program = program.clone();
        for (func, d) in &schedule.items {
            match d {
                Directive::SetBounds { var, lo, hi } => {
                    program.set_bounds(func, var, lo.clone(), hi.clone())?;
                }
                Directive::Store { region } => {
                    program.set_store_region(func, region.clone())?;
                }
                Directive::DefineExtern { impl_name, params } => {
                    program.set_extern(
                        func,
                        crate::externs::ExternSig {
                            impl_name: impl_name.clone(),
                            params: params.clone(),
                        },
                    )?;
                }
                _ => {}
            }
        }

        let symbolic = program.symbolic_constants();
        let mut funcs: BTreeMap<String, FuncState> = BTreeMap::new();
        for f in &program.funcs {
            let nest = if f.definitions.is_empty() {
                None
            } else {
                Some(lower_to_loop_nest(&program, &f.name)?)
            };
            funcs.insert(
                f.name.clone(),
                FuncState {
                    name: f.name.clone(),
                    placement: f.placement,
                    nest,
                    relays: Vec::new(),
                    buffers: Vec::new(),
                    output_buffers: Vec::new(),
                    chain_of: None,
                },
            );
        }

        let mut isolations = Vec::new();
        let mut min_depths = Vec::new();
        let mut seq = 0usize;
        for (func, d) in &schedule.items {
            seq += 1;
            let fname = func.clone();
            match d {
                Directive::Tile { .. }
                | Directive::Reorder { .. }
                | Directive::Unroll { .. }
                | Directive::Remove { .. }
                | Directive::Vectorize { .. } => {
                    let st = funcs
                        .get_mut(&fname)
                        .ok_or_else(|| ScheduleError::UnknownFunc(fname.clone()))?;
                    let nest = st.nest.as_mut().ok_or_else(|| {
                        LayoutError::InconsistentWiring(format!(
                            "loop transformation on `{fname}` which has no loop nest"
                        ))
                    })?;
                    apply_loop_directive(nest, d, &symbolic)?;
                }
                Directive::IsolateProducerChain { value, chain } => {
                    build_chain(
                        &program,
                        &mut funcs,
                        &mut isolations,
                        ChainKind::Producer,
                        &fname,
                        value,
                        chain,
                        seq,
                    )?;
                }
                Directive::IsolateConsumerChain { value, chain } => {
                    build_chain(
                        &program,
                        &mut funcs,
                        &mut isolations,
                        ChainKind::Consumer,
                        &fname,
                        value,
                        chain,
                        seq,
                    )?;
                }
                Directive::Buffer {
                    value,
                    level,
                    attrs,
                } => {
                    record_buffer(&mut funcs, &fname, value, level, attrs.clone(), false, seq)?;
                }
                Directive::LineBuffer { value, level } => {
                    record_buffer(&mut funcs, &fname, value, level, Vec::new(), true, seq)?;
                }
                Directive::Relay { value, direction } => {
                    let st = funcs
                        .get_mut(&fname)
                        .ok_or_else(|| ScheduleError::UnknownFunc(fname.clone()))?;
                    st.relays.push(RelayRule {
                        value: value.clone(),
                        direction: direction.clone(),
                        seq,
                    });
                }
                Directive::SetMinDepth { value, dest, depth } => {
                    if *depth < 1 {
                        return Err(LayoutError::InconsistentWiring(format!(
                            "set_min_depth({value}, {dest}, {depth}): depth must be at least 1"
                        )));
                    }
                    min_depths.push(MinDepthRule {
                        src_func: fname.clone(),
                        value: value.clone(),
                        dest_func: dest.clone(),
                        depth: *depth as usize,
                    });
                }
                Directive::SetBounds { .. }
                | Directive::Store { .. }
                | Directive::DefineExtern { .. } => {}
            }
        }

        let mut unroll_dims = BTreeMap::new();
        for f in funcs.keys() {
            let dims = schedule.unrolled_vars(f);
            if !dims.is_empty() {
                unroll_dims.insert(f.clone(), dims);
            }
        }
        // Relay directions must match the unroll dimensionality.
        for (name, st) in &funcs {
            for r in &st.relays {
                match unroll_dims.get(name) {
                    None => return Err(LayoutError::RelayWithoutUnroll(name.clone())),
                    Some(dims) if dims.len() != r.direction.len() => {
                        return Err(LayoutError::DirectionRankMismatch {
                            func: name.clone(),
                            got: r.direction.len(),
                            expected: dims.len(),
                        })
                    }
                    _ => {}
                }
            }
        }

        Ok(ScheduledProgram {
            program,
            funcs,
            isolations,
            min_depths,
            unroll_dims,
        })
    }

    pub fn relay_for<'a>(&'a self, func: &str, value: &str) -> Option<&'a RelayRule> {
        self.funcs
            .get(func)
            .and_then(|st| st.relays.iter().find(|r| r.value == value))
    }

    /// The producer chain isolated for (consumer, value), if any.
    pub fn producer_chain(&self, consumer: &str, value: &str) -> Option<&Isolation> {
        self.isolations
            .iter()
            .find(|i| i.kind == ChainKind::Producer && i.target == consumer && i.value == value)
    }

    pub fn consumer_chain(&self, producer: &str) -> Option<&Isolation> {
        self.isolations
            .iter()
            .find(|i| i.kind == ChainKind::Consumer && i.target == producer)
    }

    /// Functions that read this function's value (excluding itself).
    pub fn readers_of(&self, func: &str) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.program.funcs {
            if f.name != func && self.program.producers_of(&f.name).contains(func) {
                out.push(f.name.clone());
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn build_chain(
    program: &Program,
    funcs: &mut BTreeMap<String, FuncState>,
    isolations: &mut Vec<Isolation>,
    kind: ChainKind,
    target: &str,
    value: &str,
    chain: &[String],
    seq: usize,
) -> Result<(), LayoutError> {
    if chain.is_empty() {
        return Err(LayoutError::EmptyChain);
    }
    let target_state = funcs
        .get(target)
        .ok_or_else(|| ScheduleError::UnknownFunc(target.to_string()))?;
    let target_nest = target_state.nest.clone();

    // Host members must form a prefix of the listed chain (nearest memory).
    let mut seen_device = false;
    for c in chain {
        let st = funcs
            .get(c)
            .ok_or_else(|| ScheduleError::UnknownFunc(c.clone()))?;
        match st.placement {
            Placement::Host if seen_device => {
                return Err(LayoutError::HostNotAtMemoryEnd(c.clone()));
            }
            Placement::Host => {}
            Placement::Device => seen_device = true,
        }
    }

    match kind {
        ChainKind::Producer => {
            // The target must actually consume the value.
            if let Some(nest) = &target_nest {
                let reads = route::value_reads_in_nest(nest, value);
                if reads == 0 && value != target {
                    return Err(LayoutError::ValueNotConsumed {
                        func: target.to_string(),
                        value: value.to_string(),
                    });
                }
            } else if program.param(value).is_none() {
                // Extern-implemented consumers can only be fed parameters.
                return Err(LayoutError::ValueNotConsumed {
                    func: target.to_string(),
                    value: value.to_string(),
                });
            }
        }
        ChainKind::Consumer => {
            if value != target {
                return Err(LayoutError::ValueNotProduced {
                    func: target.to_string(),
                    value: value.to_string(),
                });
            }
        }
    }

    // Each chain func receives a copy of the target's loop nest specialized
    // to only produce or forward the value. A func serving several chains
    // (the driver pattern) accumulates forward statements on one shared
    // copy, in isolation order. Extern-implemented chain funcs keep no nest.
    for (pos, c) in chain.iter().enumerate() {
        let st = funcs.get_mut(c).unwrap();
        if st.nest.is_some() && st.chain_of.is_none() {
            return Err(LayoutError::InconsistentWiring(format!(
                "chain function `{c}` already has its own definitions"
            )));
        }
        st.chain_of = Some((seq, pos));
        if program.extern_sig(c).is_some() {
            continue;
        }
        if let Some(nest) = &target_nest {
            let body = match kind {
                ChainKind::Producer => route::forward_read_body(nest, value),
                ChainKind::Consumer => route::forward_write_body(program, nest, target, value),
            };
            if st.nest.is_none() {
                st.nest = Some(LoopNest {
                    func: c.clone(),
                    loops: nest.loops.clone(),
                    lets: nest.lets.clone(),
                    body: Vec::new(),
                });
            }
            if let Some(n) = &mut st.nest {
                // Earlier pruning may have dropped lets this body needs.
                for (lname, le) in &nest.lets {
                    if !n.lets.iter().any(|(x, _)| x == lname) {
                        n.lets.push((lname.clone(), le.clone()));
                    }
                }
                n.body.extend(body);
                n.prune_dead_lets();
            }
        }
    }

    isolations.push(Isolation {
        kind,
        target: target.to_string(),
        value: value.to_string(),
        chain: chain.to_vec(),
        seq,
    });
    Ok(())
}

fn record_buffer(
    funcs: &mut BTreeMap<String, FuncState>,
    func: &str,
    value: &str,
    level: &Option<String>,
    attrs: Vec<BufferAttr>,
    line: bool,
    seq: usize,
) -> Result<(), LayoutError> {
    let st = funcs
        .get_mut(func)
        .ok_or_else(|| ScheduleError::UnknownFunc(func.to_string()))?;
    if let (Some(level), Some(nest)) = (level, &st.nest) {
        if nest.loop_index(level).is_none() {
            return Err(LayoutError::UnknownLevel {
                func: func.to_string(),
                level: level.clone(),
            });
        }
    }
    let rule = BufferRule {
        value: value.to_string(),
        level: level.clone(),
        attrs,
        line,
        seq,
    };
    // A buffer on the function's own value stages its self-reads when the
    // body consumes that value; otherwise it batches the output, which the
    // functional simulator records but does not change.
    let self_read = value == func
        && st
            .nest
            .as_ref()
            .map(|n| route::value_reads_in_nest(n, value) > 0)
            .unwrap_or(false);
    if value == func && !self_read {
        st.output_buffers.push(rule);
    } else {
        st.buffers.push(rule);
    }
    Ok(())
}

/// One hardware-like compute node: a function instance at a point of the
/// unrolled iteration cross-product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pe {
    pub func: String,
    /// Raw unrolled-loop values, in unroll-directive order (e.g. <0, 5>).
    pub id: Vec<i64>,
    /// Ordinal coordinates used for relay geometry.
    pub pos: Vec<i64>,
    pub placement: Placement,
    pub is_extern: bool,
    pub nest: Option<LoopNest>,
}

impl Pe {
    pub fn label(&self) -> String {
        if self.id.is_empty() {
            self.func.clone()
        } else {
            format!(
                "{}<{}>",
                self.func,
                self.id
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    Register,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Pe(usize),
    /// Host memory port, named for the parameter or stored value it backs.
    Host(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: ChannelKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub value: String,
    /// None = unbounded (memory channels, or pre-inference register channels).
    pub depth: Option<usize>,
    pub min_depth: usize,
    /// Vector width of tokens (1 = scalar).
    pub width: usize,
    /// Tokens carry element tags (producer is a loop-nest PE).
    pub tagged: bool,
    /// Backing store index for memory channels.
    pub store: Option<usize>,
    /// Extern input port index on the destination, if the dst is extern.
    pub dst_port: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemStoreSpec {
    pub name: String,
    /// Prefill from this bound parameter at run start.
    pub prefill: Option<String>,
}

/// The read route resolved for one read slot instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReadRoute {
    ChanKeyed {
        chan: usize,
        elem: Vec<i64>,
    },
    ChanStream {
        chan: usize,
    },
    Mem {
        store: usize,
        elem: Vec<i64>,
        chan: Option<usize>,
    },
    Buffer {
        buf: usize,
        elem: Vec<i64>,
    },
    BufferDyn {
        buf: usize,
        idx: Vec<Expr>,
        env: Vec<(String, i64)>,
    },
    Local {
        elem: Vec<i64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FillSrc {
    ChanKeyed { chan: usize },
    Mem { store: usize, chan: usize },
    Parent { buf: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillItem {
    pub elem: Vec<i64>,
    pub src: FillSrc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EmitCopy {
    Chan { chan: usize, dest: Option<Vec<i64>> },
    MemWrite { store: usize, chan: Option<usize> },
    Sink { chan: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LhsSpec {
    Static(Vec<i64>),
    /// Index expressions over loop variables and `$s<n>` slot references.
    Dynamic(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeSpec {
    /// Loop and let values for this instance.
    pub env: Vec<(String, i64)>,
    /// Right-hand side with routed reads rewritten to `$s<n>` slot variables.
    pub rhs: Expr,
    pub lhs: LhsSpec,
    pub is_update: bool,
    /// Copies to perform when this instance completes a value.
    pub emit: Vec<EmitCopy>,
    /// Element being emitted; None while accumulating or for dynamic flushes.
    pub emit_elem: Option<Vec<i64>>,
    pub stmt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Step {
    /// Receive one value into slot `slot`.
    Read {
        slot: usize,
        route: ReadRoute,
    },
    /// Load a buffer with the delta the next region needs.
    Fill {
        buf: usize,
        items: Vec<FillItem>,
    },
    Compute(ComputeSpec),
    /// Emit all accumulated dynamic elements (data-dependent reductions).
    FlushDyn {
        copies: Vec<EmitCopy>,
    },
    /// Forward one received element onward (consumer-chain middles).
    ChainForward {
        value: String,
        elem: Vec<i64>,
        route: ReadRoute,
        emit: Vec<EmitCopy>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BufSpec {
    pub value: String,
    pub level: Option<String>,
    pub line: bool,
    pub attrs: Vec<BufferAttr>,
}

/// Forwarding rule: tokens arriving on `in_chan` that are not for this PE
/// move to `out_chan`; None means stray tokens are a wiring fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRule {
    pub in_chan: usize,
    pub out_chan: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub steps: Vec<Step>,
    pub buffers: Vec<BufSpec>,
    pub forwards: Vec<ForwardRule>,
    /// Channels this PE produces into (for end-of-stream marking).
    pub out_chans: Vec<usize>,
    /// Extern wiring, if this PE is extern-implemented.
    pub extern_ports: Option<ExternPorts>,
    /// Sink tokens from this extern out-port index (dangling output).
    pub extern_sink_port: Option<usize>,
    /// Number of read slots the steps use.
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternPorts {
    pub impl_name: String,
    pub in_chans: Vec<usize>,
    pub out_chans: Vec<usize>,
    /// Explicit arguments: evaluated scalars or parameter names.
    pub explicit: Vec<ExternArg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExternArg {
    Int(i64),
    Param(String),
}

/// The instantiated processing-element graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub pes: Vec<Pe>,
    pub channels: Vec<Channel>,
    pub host_funcs: Vec<String>,
    pub mem_stores: Vec<MemStoreSpec>,
    pub scripts: Vec<Script>,
    pub binding: Binding,
    /// Funcs whose sink output is restricted to a store region.
    pub store_regions: BTreeMap<String, Vec<i64>>,
    /// Host funcs that run before the device (write memory) vs after.
    pub host_pre: Vec<usize>,
    pub host_post: Vec<usize>,
}

impl SpatialGraph {
    pub fn pes_of(&self, func: &str) -> Vec<usize> {
        (0..self.pes.len())
            .filter(|&i| self.pes[i].func == func)
            .collect()
    }

    pub fn register_channels(&self) -> Vec<usize> {
        (0..self.channels.len())
            .filter(|&i| self.channels[i].kind == ChannelKind::Register)
            .collect()
    }

    pub fn memory_channels(&self) -> Vec<usize> {
        (0..self.channels.len())
            .filter(|&i| self.channels[i].kind == ChannelKind::Memory)
            .collect()
    }

    pub fn channel_endpoint_funcs(&self, c: &Channel) -> (String, String) {
        let name = |e: &Endpoint| match e {
            Endpoint::Pe(i) => self.pes[*i].func.clone(),
            Endpoint::Host(n) => format!("host:{n}"),
        };
        (name(&c.src), name(&c.dst))
    }
}

/// Fix register-channel depths from a probe simulation: depth = max(observed
/// occupancy, any set_min_depth constraint, 1). Memory channels stay
/// unbounded.
pub fn infer_channel_depths(
    graph: &SpatialGraph,
    registry: &crate::externs::Registry,
) -> Result<SpatialGraph, LayoutError> {
    let mut probe = graph.clone();
    for c in probe.channels.iter_mut() {
        if c.kind == ChannelKind::Register {
            c.depth = None;
        }
    }
    let cfg = crate::sim::RunConfig::default();
    let (_, trace) = crate::sim::run(&probe, registry, &cfg).map_err(|e| match e {
        crate::error::SimError::Deadlock(rep) => LayoutError::ProbeDeadlock(rep.to_string()),
        other => LayoutError::InconsistentWiring(format!("probe run failed: {other}")),
    })?;
    let mut out = graph.clone();
    for (i, c) in out.channels.iter_mut().enumerate() {
        if c.kind == ChannelKind::Register {
            let seen = trace.channels[i].max_occupancy;
            c.depth = Some(seen.max(c.min_depth).max(1));
        } else {
            c.depth = None;
        }
    }
    Ok(out)
}
