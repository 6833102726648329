//! Token-driven execution of a spatial graph: PEs fire when their operands
//! are available, channels are bounded FIFOs, and the run reports per-channel
//! occupancy, per-PE fire counts and deadlocks.

mod engine;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::externs::Registry;
use crate::layout::SpatialGraph;
use crate::value::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_steps: u64,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_steps: 100_000_000,
            seed: 0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max_occupancy: usize,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferStats {
    pub value: String,
    pub level: Option<String>,
    pub line: bool,
    /// Number of elements loaded into this buffer.
    pub fills: u64,
    /// Number of element reads served by this buffer (body reads plus child
    /// buffer fetches).
    pub reads: u64,
    /// Peak number of elements held.
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    EmptyInput,
    FullOutput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockedPe {
    pub pe: String,
    pub channel: usize,
    pub channel_desc: String,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub blocked: Vec<BlockedPe>,
    /// A wait-for cycle among blocked PEs, when one exists.
    pub cycle: Vec<String>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} blocked PE(s)", self.blocked.len())?;
        if !self.cycle.is_empty() {
            write!(f, "; cycle: {}", self.cycle.join(" -> "))?;
        }
        for b in self.blocked.iter().take(6) {
            write!(
                f,
                "; {} {} on {}",
                b.pe,
                match b.kind {
                    BlockKind::EmptyInput => "waits for",
                    BlockKind::FullOutput => "is full toward",
                },
                b.channel_desc
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub channel: usize,
    pub seq: u64,
    pub payload: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    pub channels: Vec<ChannelStats>,
    pub pe_fires: Vec<u64>,
    pub pe_labels: Vec<String>,
    pub buffers: Vec<Vec<BufferStats>>,
    pub steps: u64,
    pub deadlock: Option<DeadlockReport>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Collected outputs per value: element map for tagged values, a plain token
/// sequence for extern streams.
#[derive(Debug, Clone, Default)]
pub struct OutputAcc {
    pub map: BTreeMap<Vec<i64>, Scalar>,
    pub seq: Vec<Scalar>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub outputs: BTreeMap<String, Tensor>,
}

/// Execute the graph until quiescence or an error. Host functions that only
/// read bound parameters run first (serialization); host functions that read
/// device-written memory run after the device quiesces (de-serialization).
pub fn run(
    graph: &SpatialGraph,
    registry: &Registry,
    config: &RunConfig,
) -> Result<(RunOutputs, Trace), SimError> {
    engine::Engine::new(graph, registry, config)?.run()
}

/// Outputs restricted to store regions, assembled as dense tensors.
pub fn assemble_outputs(graph: &SpatialGraph, accs: &BTreeMap<String, OutputAcc>) -> RunOutputs {
    let mut out = RunOutputs::default();
    for (value, acc) in accs {
        if !acc.seq.is_empty() && acc.map.is_empty() {
            let elem = if acc.seq.iter().any(|s| matches!(s, Scalar::Float(_))) {
                crate::value::ElemType::Float
            } else {
                crate::value::ElemType::Int
            };
            out.outputs.insert(
                value.clone(),
                Tensor {
                    elem,
                    origin: vec![0],
                    shape: vec![acc.seq.len()],
                    data: acc.seq.clone(),
                },
            );
            continue;
        }
        let mut map = acc.map.clone();
        if let Some(region) = graph.store_regions.get(value) {
            map.retain(|k, _| k == region);
        }
        if map.is_empty() {
            continue;
        }
        let any_float = map.values().any(|s| matches!(s, Scalar::Float(_)));
        let elem = if any_float {
            crate::value::ElemType::Float
        } else {
            crate::value::ElemType::Int
        };
        let mut fixed = map;
        if any_float {
            for v in fixed.values_mut() {
                *v = Scalar::Float(v.as_f64());
            }
        }
        if let Some(t) = Tensor::from_elems(elem, &fixed) {
            out.outputs.insert(value.clone(), t);
        }
    }
    out
}
