//! Discrete-event cost model for the ring collectives.
//!
//! Every device owns three serial resources: its outgoing clockwise link, its
//! outgoing counter-clockwise link, and one vector unit (VPU). A collective is
//! lowered to a task graph at microshard granularity (sends, dequantize, add,
//! both quantization passes). Each resource executes its tasks in a fixed
//! `(step, minishard, phase, microshard, creation order)` sequence, starting
//! the next one once the resource is free and its inputs have arrived. A
//! transfer of `b` bytes holds its link for `b / bandwidth` seconds and is
//! visible to the receiver `hop_latency` later.
//!
//! Ordering rules encoded as graph edges:
//! - a microshard is dequantized only after it and its minishard's metadata
//!   have arrived;
//! - Qp2 of any microshard waits for Qp1 of every microshard in its minishard;
//! - each hop's messages leave in order, metadata of a minishard first;
//! - at a shard's owner, arcs are merged in plan order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::collectives::{gather_plan, reduction_plan, CollectiveConfig, Direction, Variant};
use crate::error::{Error, Result};
use crate::layout::{PartitionSpec, CHUNK_LEN};
use crate::numerics::CodecKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Bytes per second in each direction of a link.
    pub bandwidth: f64,
    /// Seconds between a transfer leaving the link and the receiver seeing it.
    pub hop_latency: f64,
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidParams(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.hop_latency >= 0.0 && self.hop_latency.is_finite()) {
            return Err(Error::InvalidParams(format!("hop latency must be non-negative, got {}", self.hop_latency)));
        }
        Ok(())
    }
}

/// Vector-unit throughputs in elements per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeParams {
    pub dequant_rate: f64,
    pub add_rate: f64,
    pub qp1_rate: f64,
    pub qp2_rate: f64,
    pub cast_rate: f64,
    /// Run dequantize, add and Qp1 as one pass limited by the slowest of them.
    #[serde(default)]
    pub fused_dq_add_qp1: bool,
}

impl ComputeParams {
    /// Every rate set to `rate`, unfused.
    pub fn uniform(rate: f64) -> Self {
        ComputeParams { dequant_rate: rate, add_rate: rate, qp1_rate: rate, qp2_rate: rate, cast_rate: rate, fused_dq_add_qp1: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("dequant_rate", self.dequant_rate),
            ("add_rate", self.add_rate),
            ("qp1_rate", self.qp1_rate),
            ("qp2_rate", self.qp2_rate),
            ("cast_rate", self.cast_rate),
        ] {
            if !(r > 0.0) || r.is_nan() {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// How one stage puts data on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WireFormat {
    /// Plain values: BF16 is 2 bytes, the ideal 2:1 compression is 1 byte.
    /// `cast` charges 8-bit encode/decode work around every add.
    Raw { bytes_per_element: u32, cast: bool },
    /// Block-wise quantized codes plus 32-bit scale metadata.
    Quantized(CodecKind),
}

impl WireFormat {
    pub const BF16: WireFormat = WireFormat::Raw { bytes_per_element: 2, cast: false };

    pub fn payload_bytes_per_element(&self) -> u32 {
        match self {
            WireFormat::Raw { bytes_per_element, .. } => *bytes_per_element,
            WireFormat::Quantized(_) => 1,
        }
    }
}

/// A collective lowered for timing: variant, partitioning and per-stage wire
/// format. `gather: None` simulates the reduce-scatter alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPlan {
    pub variant: Variant,
    pub spec: PartitionSpec,
    pub scatter: WireFormat,
    pub gather: Option<WireFormat>,
}

impl SimPlan {
    pub fn from_config(cfg: &CollectiveConfig) -> Self {
        let fmt = |q: bool| if q { WireFormat::Quantized(cfg.kind) } else { WireFormat::BF16 };
        SimPlan { variant: cfg.variant, spec: cfg.spec, scatter: fmt(cfg.quantize_rs), gather: Some(fmt(cfg.quantize_ag)) }
    }

    pub fn baseline(spec: PartitionSpec) -> Self {
        SimPlan { variant: Variant::FullLoop, spec, scatter: WireFormat::BF16, gather: Some(WireFormat::BF16) }
    }

    /// Cast-to-8-bit AllReduce without scaling or metadata.
    pub fn naive(kind: CodecKind, spec: PartitionSpec) -> Self {
        let _ = kind; // all 8-bit casts cost the same here
        let fmt = WireFormat::Raw { bytes_per_element: 1, cast: true };
        SimPlan { variant: Variant::FullLoop, spec, scatter: fmt, gather: Some(fmt) }
    }

    /// Baseline with half the bytes and nothing else: the 2:1 compression ideal.
    pub fn ideal_compressed(spec: PartitionSpec) -> Self {
        let fmt = WireFormat::Raw { bytes_per_element: 1, cast: false };
        SimPlan { variant: Variant::FullLoop, spec, scatter: fmt, gather: Some(fmt) }
    }

    pub fn reduce_scatter_only(mut self) -> Self {
        self.gather = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.variant == Variant::SemiLoop && self.spec.num_devices % 2 != 0 {
            return Err(Error::SemiLoopOddN(self.spec.num_devices));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Resource {
    LinkCw,
    LinkCcw,
    Vpu,
}

impl Resource {
    fn link(direction: Direction) -> Self {
        match direction {
            Direction::Cw => Resource::LinkCw,
            Direction::Ccw => Resource::LinkCcw,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::LinkCw => "LINK_CW",
            Resource::LinkCcw => "LINK_CCW",
            Resource::Vpu => "VPU",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Metadata,
    Microshard,
    RawShard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    ReduceScatter,
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Send(MessageKind),
    Dq,
    Add,
    Qp1,
    Qp2,
    /// Fused dequantize + add (+ Qp1 when the result is requantized).
    Fused,
    Cast,
}

/// Structured identity of a scheduled task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventTag {
    pub stage: Stage,
    pub phase: Phase,
    pub shard: usize,
    /// Direction of the arc or route this task belongs to.
    pub arc: Direction,
    /// Position of the arc in the owner's merge order.
    pub chain: usize,
    pub step: usize,
    pub minishard: usize,
    pub microshard: usize,
}

impl EventTag {
    pub fn label(&self) -> String {
        let stage = match self.stage {
            Stage::ReduceScatter => "rs",
            Stage::AllGather => "ag",
        };
        let phase = match self.phase {
            Phase::Send(MessageKind::Metadata) => "send-meta",
            Phase::Send(MessageKind::Microshard) => "send-micro",
            Phase::Send(MessageKind::RawShard) => "send-raw",
            Phase::Dq => "dq",
            Phase::Add => "add",
            Phase::Qp1 => "qp1",
            Phase::Qp2 => "qp2",
            Phase::Fused => "fused",
            Phase::Cast => "cast",
        };
        let arc = match self.arc {
            Direction::Cw => "cw",
            Direction::Ccw => "ccw",
        };
        format!(
            "{stage} {phase} shard={} arc={arc}{} step={} mini={} micro={}",
            self.shard, self.chain, self.step, self.minishard, self.microshard
        )
    }

    /// Whether this task folds a received partial into an accumulator.
    pub fn is_reduction(&self) -> bool {
        self.stage == Stage::ReduceScatter && matches!(self.phase, Phase::Add | Phase::Fused)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub device: usize,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub bytes: usize,
    pub tag: EventTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub num_devices: usize,
    pub events: Vec<Event>,
    /// Latest completion, counting the latency of final deliveries.
    pub total_time: f64,
}

/// Flat form of an [`Event`] for export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub device: usize,
    pub resource: &'static str,
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

impl Timeline {
    /// Events of one resource ordered by start time.
    pub fn resource_events(&self, device: usize, resource: Resource) -> Vec<&Event> {
        let mut ev: Vec<&Event> = self.events.iter().filter(|e| e.device == device && e.resource == resource).collect();
        ev.sort_by(|a, b| a.start.total_cmp(&b.start));
        ev
    }

    /// Checks that no two events overlap on any resource and that
    /// `total_time` covers every event.
    pub fn validate(&self) -> Result<()> {
        for d in 0..self.num_devices {
            for r in [Resource::LinkCw, Resource::LinkCcw, Resource::Vpu] {
                for w in self.resource_events(d, r).windows(2) {
                    if w[1].start < w[0].end {
                        return Err(Error::InvalidParams(format!(
                            "overlap on device {d} {}: `{}` and `{}`",
                            r.name(),
                            w[0].tag.label(),
                            w[1].tag.label()
                        )));
                    }
                }
            }
        }
        let max_end = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        if max_end > self.total_time {
            return Err(Error::InvalidParams("an event ends after total_time".into()));
        }
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = EventRecord> + '_ {
        self.events.iter().map(|e| EventRecord { device: e.device, resource: e.resource.name(), start_s: e.start, end_s: e.end, label: e.tag.label() })
    }

    /// JSON lines with `device`, `resource`, `start_s`, `end_s`, `label`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Link idle seconds inside each link's busy window, summed over devices.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LinkIdle {
    pub cw: f64,
    pub ccw: f64,
}

impl LinkIdle {
    pub fn total(&self) -> f64 {
        self.cw + self.ccw
    }
}

pub fn idle_time(t: &Timeline) -> LinkIdle {
    let mut idle = LinkIdle::default();
    for d in 0..t.num_devices {
        for (r, slot) in [(Resource::LinkCw, &mut idle.cw), (Resource::LinkCcw, &mut idle.ccw)] {
            let ev = t.resource_events(d, r);
            for w in ev.windows(2) {
                *slot += (w[1].start - w[0].end).max(0.0);
            }
        }
    }
    idle
}

/// Bandwidth term of reduce-scatter on `n` devices for `bytes` of input.
pub fn lower_bound(variant: Variant, n: usize, bytes: f64, bandwidth: f64) -> f64 {
    match variant {
        Variant::FullLoop => (n as f64 - 1.0) * bytes / (2.0 * n as f64 * bandwidth),
        Variant::SemiLoop => bytes / (2.0 * bandwidth),
    }
}

/// Simulate the AllReduce `cfg` describes on a BF16 tensor of `tensor_bytes`.
pub fn simulate(cfg: &CollectiveConfig, tensor_bytes: usize, link: &LinkParams, compute: &ComputeParams) -> Result<Timeline> {
    cfg.validate()?;
    simulate_plan(&SimPlan::from_config(cfg), tensor_bytes, link, compute)
}

/// `time(b) / time(a)`: how much faster `a` is than `b`.
pub fn predict_speedup(a: &SimPlan, b: &SimPlan, tensor_bytes: usize, link: &LinkParams, compute: &ComputeParams) -> Result<f64> {
    let ta = simulate_plan(a, tensor_bytes, link, compute)?.total_time;
    let tb = simulate_plan(b, tensor_bytes, link, compute)?.total_time;
    Ok(tb / ta)
}

/// Elements of a BF16 tensor of `tensor_bytes`, checked against `spec`.
pub fn elements_for_bytes(tensor_bytes: usize, spec: &PartitionSpec) -> Result<usize> {
    if tensor_bytes % 2 != 0 {
        return Err(Error::InvalidParams(format!("{tensor_bytes} bytes is not a whole number of BF16 elements")));
    }
    let elements = tensor_bytes / 2;
    spec.check(elements)?;
    Ok(elements)
}

pub fn simulate_plan(plan: &SimPlan, tensor_bytes: usize, link: &LinkParams, compute: &ComputeParams) -> Result<Timeline> {
    plan.validate()?;
    link.validate()?;
    compute.validate()?;
    let elements = elements_for_bytes(tensor_bytes, &plan.spec)?;
    let mut g = Graph::new(plan.spec.num_devices, link.hop_latency);
    Lowering { plan, link, compute, g: &mut g, micro_len: plan.spec.microshard_len(elements) }.lower()?;
    let timeline = g.run();
    debug_assert!(timeline.validate().is_ok());
    Ok(timeline)
}

type TaskId = usize;

#[derive(Debug)]
struct Task {
    device: usize,
    resource: Resource,
    duration: f64,
    bytes: usize,
    key: (usize, usize, u8, usize),
    tag: EventTag,
    succs: Vec<(TaskId, f64)>,
    preds: usize,
    ready_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Graph {
    n: usize,
    hop_latency: f64,
    tasks: Vec<Task>,
}

impl Graph {
    fn new(n: usize, hop_latency: f64) -> Self {
        Graph { n, hop_latency, tasks: Vec::new() }
    }

    fn add(&mut self, device: usize, resource: Resource, duration: f64, bytes: usize, rank: u8, tag: EventTag) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(Task {
            device,
            resource,
            duration,
            bytes,
            key: (tag.step, tag.minishard, rank, tag.microshard),
            tag,
            succs: Vec::new(),
            preds: 0,
            ready_at: 0.0,
        });
        id
    }

    fn dep(&mut self, from: TaskId, to: TaskId, delay: f64) {
        self.tasks[from].succs.push((to, delay));
        self.tasks[to].preds += 1;
    }

    /// Each resource runs its tasks in key order, starting one as soon as
    /// the resource is free and the task's inputs have arrived. The order
    /// does not depend on any duration, so every start time is a max-plus
    /// expression of durations and latencies: speeding anything up never
    /// delays anything.
    fn run(mut self) -> Timeline {
        let slots = self.n * 3;
        let slot = |t: &Task| t.device * 3 + t.resource.index();
        let mut queues: Vec<Vec<TaskId>> = vec![Vec::new(); slots];
        for (id, t) in self.tasks.iter().enumerate() {
            queues[slot(t)].push(id);
        }
        for q in &mut queues {
            q.sort_by_key(|&id| (self.tasks[id].key, id));
        }
        let mut head = vec![0usize; slots];
        let mut ready = vec![false; self.tasks.len()];
        let mut busy = vec![false; slots];
        let mut finishes: BinaryHeap<Reverse<(Time, TaskId)>> = BinaryHeap::new();
        let mut pending: BinaryHeap<Reverse<(Time, TaskId)>> = BinaryHeap::new();
        let mut dirty: Vec<usize> = Vec::new();
        let mut events = Vec::with_capacity(self.tasks.len());
        let mut starts = vec![0.0f64; self.tasks.len()];

        for (id, t) in self.tasks.iter().enumerate() {
            if t.preds == 0 {
                ready[id] = true;
                dirty.push(slot(t));
            }
        }
        let mut now = 0.0f64;
        loop {
            dirty.sort_unstable();
            dirty.dedup();
            for s in dirty.drain(..) {
                if busy[s] {
                    continue;
                }
                if let Some(&id) = queues[s].get(head[s]) {
                    if ready[id] {
                        head[s] += 1;
                        busy[s] = true;
                        starts[id] = now;
                        finishes.push(Reverse((Time(now + self.tasks[id].duration), id)));
                    }
                }
            }
            let next_finish = finishes.peek().map(|Reverse((t, _))| t.0);
            let next_pending = pending.peek().map(|Reverse((t, _))| t.0);
            now = match (next_finish, next_pending) {
                (None, None) => break,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (Some(a), Some(b)) => a.min(b),
            };
            while let Some(&Reverse((Time(t), id))) = finishes.peek() {
                if t > now {
                    break;
                }
                finishes.pop();
                let task = &self.tasks[id];
                let s = slot(task);
                busy[s] = false;
                dirty.push(s);
                events.push(Event {
                    device: task.device,
                    resource: task.resource,
                    start: starts[id],
                    end: t,
                    bytes: task.bytes,
                    tag: task.tag,
                });
                let succs = std::mem::take(&mut self.tasks[id].succs);
                for (succ, delay) in succs {
                    let st = &mut self.tasks[succ];
                    st.preds -= 1;
                    st.ready_at = st.ready_at.max(t + delay);
                    if st.preds == 0 {
                        if st.ready_at <= now {
                            ready[succ] = true;
                            dirty.push(slot(st));
                        } else {
                            pending.push(Reverse((Time(st.ready_at), succ)));
                        }
                    }
                }
            }
            while let Some(&Reverse((Time(t), id))) = pending.peek() {
                if t > now {
                    break;
                }
                pending.pop();
                ready[id] = true;
                dirty.push(slot(&self.tasks[id]));
            }
        }
        assert_eq!(events.len(), self.tasks.len(), "resource order contradicts a dependency");
        let lat = self.hop_latency;
        let total_time = events.iter().map(|e| if e.resource == Resource::Vpu { e.end } else { e.end + lat }).fold(0.0, f64::max);
        Timeline { num_devices: self.n, events, total_time }
    }
}

/// Tasks after which a hop's messages may leave, per minishard and microshard.
struct Outbox {
    /// Per minishard: tasks completing that minishard's Qp1 (quantized only).
    meta_after: Vec<Vec<TaskId>>,
    /// Per (minishard, microshard): task producing the sendable microshard.
    micro_after: Vec<Vec<Option<TaskId>>>,
}

/// Link tasks of one hop, used as the receiver's dependencies.
struct Arrivals {
    meta: Vec<Option<TaskId>>,
    micro: Vec<Vec<TaskId>>,
}

// Within one step and minishard: reduce and Qp1, then Qp2, then the sends.
// Every dependency edge points forward in this order.
const RANK_COMPUTE: u8 = 0;
const RANK_QP2: u8 = 1;
const RANK_SEND: u8 = 2;

struct Lowering<'a> {
    plan: &'a SimPlan,
    link: &'a LinkParams,
    compute: &'a ComputeParams,
    g: &'a mut Graph,
    micro_len: usize,
}

impl Lowering<'_> {
    fn m(&self) -> usize {
        self.plan.spec.minishards
    }

    fn u(&self) -> usize {
        self.plan.spec.microshards
    }

    fn secs(&self, elems: usize, rate: f64) -> f64 {
        elems as f64 / rate
    }

    fn lower(&mut self) -> Result<()> {
        let n = self.plan.spec.num_devices;
        let plans = reduction_plan(self.plan.variant, n)?;
        let routes = gather_plan(n)?;
        let scatter_steps = plans.iter().flat_map(|p| p.chains.iter().map(|c| c.devices.len())).max().unwrap_or(0);
        for p in &plans {
            let lanes = p.lanes.len();
            let elems = self.micro_len * lanes / CHUNK_LEN;
            let base = EventTag {
                stage: Stage::ReduceScatter,
                phase: Phase::Add,
                shard: p.shard,
                arc: p.chains[0].direction,
                chain: 0,
                step: 0,
                minishard: 0,
                microshard: 0,
            };
            let mut finals: Option<Vec<Vec<TaskId>>> = None;
            let last_chain = p.chains.len() - 1;
            for (ci, chain) in p.chains.iter().enumerate() {
                let tag = EventTag { arc: chain.direction, chain: ci, ..base };
                let mut arrivals: Option<Arrivals> = None;
                for (h, &sender) in chain.devices.iter().enumerate() {
                    let tag = EventTag { step: h, ..tag };
                    let outbox = match &arrivals {
                        None => self.produce_first(sender, elems, tag),
                        Some(arr) => self.produce_middle(sender, elems, arr, tag),
                    };
                    arrivals = Some(self.send(sender, chain.direction, lanes, elems, self.plan.scatter, &outbox, None, tag));
                }
                let arr = arrivals.expect("chains are never empty");
                let tag = EventTag { step: chain.devices.len(), ..tag };
                let fuse_qp1 = ci == last_chain
                    && self.compute.fused_dq_add_qp1
                    && matches!(self.plan.gather, Some(WireFormat::Quantized(_)));
                finals = Some(self.merge_at_owner(p.shard, elems, &arr, finals.as_ref(), fuse_qp1, tag));
            }
            let finals = finals.expect("plans have at least one chain");
            let Some(gather) = self.plan.gather else { continue };
            let tag = EventTag { stage: Stage::AllGather, step: scatter_steps, chain: 0, ..base };
            let fused_qp1 = self.compute.fused_dq_add_qp1 && matches!(gather, WireFormat::Quantized(_));
            let outbox = self.prepare_gather(p.shard, elems, &finals, gather, fused_qp1, tag);
            let covered = routes.iter().filter(|r| r.shard == p.shard && (p.lanes.is_all() || r.lanes == p.lanes));
            for route in covered {
                let lanes = route.lanes.len();
                let elems = self.micro_len * lanes / CHUNK_LEN;
                let mut arrivals: Option<Arrivals> = None;
                for (h, pair) in route.path.windows(2).enumerate() {
                    let tag = EventTag { arc: route.direction, step: scatter_steps + h, ..tag };
                    let arr = self.send(pair[0], route.direction, lanes, elems, gather, &outbox, arrivals.as_ref(), tag);
                    self.gather_output(pair[1], elems, gather, &arr, EventTag { step: tag.step + 1, ..tag });
                    arrivals = Some(arr);
                }
            }
        }
        Ok(())
    }

    fn vpu(&mut self, device: usize, secs: f64, rank: u8, phase: Phase, tag: EventTag) -> TaskId {
        self.g.add(device, Resource::Vpu, secs, 0, rank, EventTag { phase, ..tag })
    }

    /// Qp2 for every microshard once its minishard's Qp1 tasks are done.
    fn finish_quantization(&mut self, device: usize, elems: usize, qp1: Vec<Vec<TaskId>>, tag: EventTag) -> Outbox {
        let mut micro_after = Vec::with_capacity(self.m());
        for (k, done) in qp1.iter().enumerate() {
            let mut row = Vec::with_capacity(self.u());
            for j in 0..self.u() {
                let t = self.vpu(device, self.secs(elems, self.compute.qp2_rate), RANK_QP2, Phase::Qp2, EventTag { minishard: k, microshard: j, ..tag });
                for &q in done {
                    self.g.dep(q, t, 0.0);
                }
                row.push(Some(t));
            }
            micro_after.push(row);
        }
        Outbox { meta_after: qp1, micro_after }
    }

    fn produce_first(&mut self, device: usize, elems: usize, tag: EventTag) -> Outbox {
        let (m, u) = (self.m(), self.u());
        match self.plan.scatter {
            WireFormat::Quantized(_) => {
                let qp1 = (0..m)
                    .map(|k| {
                        (0..u)
                            .map(|j| self.vpu(device, self.secs(elems, self.compute.qp1_rate), RANK_COMPUTE, Phase::Qp1, EventTag { minishard: k, microshard: j, ..tag }))
                            .collect()
                    })
                    .collect();
                self.finish_quantization(device, elems, qp1, tag)
            }
            WireFormat::Raw { cast, .. } => {
                let micro_after = (0..m)
                    .map(|k| {
                        (0..u)
                            .map(|j| {
                                cast.then(|| self.vpu(device, self.secs(elems, self.compute.cast_rate), RANK_COMPUTE, Phase::Cast, EventTag { minishard: k, microshard: j, ..tag }))
                            })
                            .collect()
                    })
                    .collect();
                Outbox { meta_after: vec![Vec::new(); m], micro_after }
            }
        }
    }

    fn raw_add_secs(&self, elems: usize, casts: usize) -> f64 {
        self.secs(elems, self.compute.add_rate) + casts as f64 * self.secs(elems, self.compute.cast_rate)
    }

    fn produce_middle(&mut self, device: usize, elems: usize, arr: &Arrivals, tag: EventTag) -> Outbox {
        let (m, u) = (self.m(), self.u());
        let lat = self.link.hop_latency;
        match self.plan.scatter {
            WireFormat::Quantized(_) => {
                let mut qp1 = Vec::with_capacity(m);
                for k in 0..m {
                    let mut done = Vec::with_capacity(u);
                    for j in 0..u {
                        let tag = EventTag { minishard: k, microshard: j, ..tag };
                        let first;
                        let last;
                        if self.compute.fused_dq_add_qp1 {
                            let rate = self.compute.dequant_rate.min(self.compute.add_rate).min(self.compute.qp1_rate);
                            first = self.vpu(device, self.secs(elems, rate), RANK_COMPUTE, Phase::Fused, tag);
                            last = first;
                        } else {
                            first = self.vpu(device, self.secs(elems, self.compute.dequant_rate), RANK_COMPUTE, Phase::Dq, tag);
                            let add = self.vpu(device, self.secs(elems, self.compute.add_rate), RANK_COMPUTE, Phase::Add, tag);
                            last = self.vpu(device, self.secs(elems, self.compute.qp1_rate), RANK_COMPUTE, Phase::Qp1, tag);
                            self.g.dep(first, add, 0.0);
                            self.g.dep(add, last, 0.0);
                        }
                        self.g.dep(arr.micro[k][j], first, lat);
                        if let Some(meta) = arr.meta[k] {
                            self.g.dep(meta, first, lat);
                        }
                        done.push(last);
                    }
                    qp1.push(done);
                }
                self.finish_quantization(device, elems, qp1, tag)
            }
            WireFormat::Raw { cast, .. } => {
                let secs = self.raw_add_secs(elems, if cast { 3 } else { 0 });
                let mut micro_after = Vec::with_capacity(m);
                for k in 0..m {
                    let mut row = Vec::with_capacity(u);
                    for j in 0..u {
                        let t = self.vpu(device, secs, RANK_COMPUTE, Phase::Add, EventTag { minishard: k, microshard: j, ..tag });
                        self.g.dep(arr.micro[k][j], t, lat);
                        row.push(Some(t));
                    }
                    micro_after.push(row);
                }
                Outbox { meta_after: vec![Vec::new(); m], micro_after }
            }
        }
    }

    /// Emit one hop's message stream. With `forward_of`, messages are
    /// relayed as soon as they arrive instead of waiting on `outbox`.
    #[allow(clippy::too_many_arguments)]
    fn send(
        &mut self,
        sender: usize,
        direction: Direction,
        lanes: usize,
        elems: usize,
        fmt: WireFormat,
        outbox: &Outbox,
        forward_of: Option<&Arrivals>,
        tag: EventTag,
    ) -> Arrivals {
        let (m, u) = (self.m(), self.u());
        let bw = self.link.bandwidth;
        let lat = self.link.hop_latency;
        let res = Resource::link(direction);
        let mut prev: Option<TaskId> = None;
        let mut meta = Vec::with_capacity(m);
        let mut micro = Vec::with_capacity(m);
        for k in 0..m {
            let tag = EventTag { minishard: k, microshard: 0, ..tag };
            if let WireFormat::Quantized(_) = fmt {
                let bytes = lanes * 4;
                let t = self.g.add(sender, res, bytes as f64 / bw, bytes, RANK_SEND, EventTag { phase: Phase::Send(MessageKind::Metadata), ..tag });
                match forward_of {
                    Some(a) => self.g.dep(a.meta[k].expect("quantized hops carry metadata"), t, lat),
                    None => {
                        for &q in &outbox.meta_after[k] {
                            self.g.dep(q, t, 0.0);
                        }
                    }
                }
                if let Some(p) = prev {
                    self.g.dep(p, t, 0.0);
                }
                prev = Some(t);
                meta.push(Some(t));
            } else {
                meta.push(None);
            }
            let (kind, bytes) = match fmt {
                WireFormat::Quantized(_) => (MessageKind::Microshard, elems),
                WireFormat::Raw { bytes_per_element, .. } => (MessageKind::RawShard, elems * bytes_per_element as usize),
            };
            let mut row = Vec::with_capacity(u);
            for j in 0..u {
                let t = self.g.add(sender, res, bytes as f64 / bw, bytes, RANK_SEND, EventTag { phase: Phase::Send(kind), microshard: j, ..tag });
                match forward_of {
                    Some(a) => self.g.dep(a.micro[k][j], t, lat),
                    None => {
                        if let Some(src) = outbox.micro_after[k][j] {
                            self.g.dep(src, t, 0.0);
                        }
                    }
                }
                if let Some(p) = prev {
                    self.g.dep(p, t, 0.0);
                }
                prev = Some(t);
                row.push(t);
            }
            micro.push(row);
        }
        Arrivals { meta, micro }
    }

    /// Owner folds an arriving arc into its accumulator; returns the final
    /// task per microshard.
    fn merge_at_owner(
        &mut self,
        owner: usize,
        elems: usize,
        arr: &Arrivals,
        previous: Option<&Vec<Vec<TaskId>>>,
        fuse_qp1: bool,
        tag: EventTag,
    ) -> Vec<Vec<TaskId>> {
        let (m, u) = (self.m(), self.u());
        let lat = self.link.hop_latency;
        let c = self.compute;
        let mut out = Vec::with_capacity(m);
        for k in 0..m {
            let mut row = Vec::with_capacity(u);
            for j in 0..u {
                let tag = EventTag { minishard: k, microshard: j, ..tag };
                let (first, last) = match self.plan.scatter {
                    WireFormat::Quantized(_) if c.fused_dq_add_qp1 => {
                        let mut rate = c.dequant_rate.min(c.add_rate);
                        if fuse_qp1 {
                            rate = rate.min(c.qp1_rate);
                        }
                        let t = self.vpu(owner, self.secs(elems, rate), RANK_COMPUTE, Phase::Fused, tag);
                        (t, t)
                    }
                    WireFormat::Quantized(_) => {
                        let dq = self.vpu(owner, self.secs(elems, c.dequant_rate), RANK_COMPUTE, Phase::Dq, tag);
                        let add = self.vpu(owner, self.secs(elems, c.add_rate), RANK_COMPUTE, Phase::Add, tag);
                        self.g.dep(dq, add, 0.0);
                        (dq, add)
                    }
                    WireFormat::Raw { cast, .. } => {
                        let mut secs = self.raw_add_secs(elems, if cast { 2 } else { 0 });
                        if fuse_qp1 {
                            secs = secs.max(self.secs(elems, c.qp1_rate));
                        }
                        let t = self.vpu(owner, secs, RANK_COMPUTE, Phase::Add, tag);
                        (t, t)
                    }
                };
                self.g.dep(arr.micro[k][j], first, lat);
                if let Some(meta) = arr.meta[k] {
                    self.g.dep(meta, first, lat);
                }
                if let Some(prev) = previous {
                    self.g.dep(prev[k][j], last, 0.0);
                }
                row.push(last);
            }
            out.push(row);
        }
        out
    }

    /// Owner-side work before a finished shard can start its all-gather.
    fn prepare_gather(&mut self, owner: usize, elems: usize, finals: &[Vec<TaskId>], fmt: WireFormat, qp1_fused: bool, tag: EventTag) -> Outbox {
        let (m, u) = (self.m(), self.u());
        match fmt {
            WireFormat::Quantized(_) => {
                let mut qp1 = Vec::with_capacity(m);
                for (k, row) in finals.iter().enumerate() {
                    let mut done = Vec::with_capacity(u);
                    for (j, &f) in row.iter().enumerate() {
                        if qp1_fused {
                            done.push(f);
                        } else {
                            let t = self.vpu(owner, self.secs(elems, self.compute.qp1_rate), RANK_COMPUTE, Phase::Qp1, EventTag { minishard: k, microshard: j, ..tag });
                            self.g.dep(f, t, 0.0);
                            done.push(t);
                        }
                    }
                    qp1.push(done);
                }
                self.finish_quantization(owner, elems, qp1, tag)
            }
            WireFormat::Raw { cast, .. } => {
                let mut micro_after = Vec::with_capacity(m);
                for (k, row) in finals.iter().enumerate() {
                    let mut out = Vec::with_capacity(u);
                    for (j, &f) in row.iter().enumerate() {
                        if cast {
                            let t = self.vpu(owner, self.secs(elems, self.compute.cast_rate), RANK_COMPUTE, Phase::Cast, EventTag { minishard: k, microshard: j, ..tag });
                            self.g.dep(f, t, 0.0);
                            out.push(Some(t));
                        } else {
                            out.push(Some(f));
                        }
                    }
                    micro_after.push(out);
                }
                Outbox { meta_after: vec![Vec::new(); m], micro_after }
            }
        }
    }

    /// Receiver converts a gathered shard back to the output dtype.
    fn gather_output(&mut self, device: usize, elems: usize, fmt: WireFormat, arr: &Arrivals, tag: EventTag) {
        let (phase, rate) = match fmt {
            WireFormat::Quantized(_) => (Phase::Dq, self.compute.dequant_rate),
            WireFormat::Raw { cast: true, .. } => (Phase::Cast, self.compute.cast_rate),
            WireFormat::Raw { cast: false, .. } => return,
        };
        let lat = self.link.hop_latency;
        for k in 0..self.m() {
            for j in 0..self.u() {
                let t = self.vpu(device, self.secs(elems, rate), RANK_COMPUTE, phase, EventTag { minishard: k, microshard: j, ..tag });
                self.g.dep(arr.micro[k][j], t, lat);
                if let Some(meta) = arr.meta[k] {
                    self.g.dep(meta, t, lat);
                }
            }
        }
    }
}

/// A named, versioned calibration profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub version: u32,
    #[serde(default)]
    pub description: String,
    pub num_devices: usize,
    /// Chunks per scale factor; the minishard count follows from the tensor size.
    pub block_size: usize,
    pub microshards: usize,
    pub link: LinkParams,
    pub compute: ComputeParams,
}

const PRESETS: &[(&str, &str)] = &[("v5e-like", include_str!("../presets/v5e-like.json"))];

impl Preset {
    pub fn names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn named(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
        let preset: Preset = serde_json::from_str(text).map_err(|e| Error::InvalidParams(format!("preset `{name}`: {e}")))?;
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.compute.validate()?;
        if self.num_devices < 2 || self.block_size == 0 || self.microshards == 0 {
            return Err(Error::InvalidParams(format!("preset `{}` has degenerate partitioning", self.name)));
        }
        Ok(())
    }

    /// Partitioning of a BF16 tensor of `tensor_bytes` under this preset.
    pub fn spec_for_bytes(&self, tensor_bytes: usize) -> Result<PartitionSpec> {
        PartitionSpec::for_block_size(tensor_bytes / 2, self.num_devices, self.block_size, self.microshards)
    }
}
