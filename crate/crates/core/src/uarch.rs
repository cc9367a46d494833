//! Virtual-time model of one hardware thread running a hammer loop.
//!
//! The model keeps only the resources that matter for hammering: a reorder
//! window, a load queue, fill buffers, a flush unit, per-bank DRAM
//! availability, address-dependency chains and fences. Memory operations of
//! one class (loads, prefetches, flushes) issue in program order among
//! themselves but may overtake older operations of another class, which is
//! where flush/prefetch races come from.
//!
//! Because every constraint on an instruction refers to older instructions
//! only, the simulation is a single pass in program order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dram::AddressMapping;
use crate::error::{Error, Result};

/// Cache-line size used to group targets into lines.
pub const LINE_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefetchHint {
    T0,
    T1,
    T2,
    Nta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstrKind {
    Load,
    Prefetch(PrefetchHint),
    Flush,
    Nop,
    Lfence,
    Mfence,
    Cpuid,
    ObfuscatedBranch,
}

impl InstrKind {
    pub fn is_memory(self) -> bool {
        matches!(self, Self::Load | Self::Prefetch(_) | Self::Flush)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Addressing {
    /// Address loaded from an index-driven table (dependency chain).
    Indirect,
    /// Address encoded in the instruction.
    Immediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub kind: InstrKind,
    pub target: Option<u64>,
    pub addressing: Addressing,
}

impl Instruction {
    pub fn memory(kind: InstrKind, target: u64, addressing: Addressing) -> Self {
        debug_assert!(kind.is_memory());
        Self { kind, target: Some(target), addressing }
    }

    pub fn plain(kind: InstrKind) -> Self {
        debug_assert!(!kind.is_memory());
        Self { kind, target: None, addressing: Addressing::Immediate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_memory() != self.target.is_some() {
            return Err(Error::Contract(format!("{:?} with target {:?}", self.kind, self.target)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HammerKind {
    Load,
    Prefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeStyle {
    /// Compiled loop reading aggressor addresses from an array.
    CppIndirect,
    /// JIT-emitted loop with addresses as immediates.
    AsmImmediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "count")]
pub enum BarrierKind {
    None,
    Nop(u32),
    Lfence,
    Mfence,
    Cpuid,
}

impl BarrierKind {
    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Nop(k) => format!("nop{k}"),
            Self::Lfence => "lfence".into(),
            Self::Mfence => "mfence".into(),
            Self::Cpuid => "cpuid".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BarrierPolicy {
    pub kind: BarrierKind,
    /// Insert a hard-to-predict branch at each loop head.
    pub obfuscate_branches: bool,
}

impl BarrierPolicy {
    pub const NONE: Self = Self { kind: BarrierKind::None, obfuscate_branches: false };

    pub fn new(kind: BarrierKind) -> Self {
        Self { kind, obfuscate_branches: false }
    }

    pub fn nop(k: u32) -> Self {
        Self::new(BarrierKind::Nop(k))
    }
}

/// Pipeline parameters. Times are nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub rob_size: usize,
    /// How far past the oldest unretired instruction a memory op may issue.
    pub speculation_window: usize,
    pub load_queue_size: usize,
    pub fill_buffer_size: usize,
    /// DRAM round trip of a miss, from activation to data.
    pub load_latency: f64,
    pub hit_latency: f64,
    /// Address translation after which a prefetch may retire.
    pub prefetch_issue_cost: f64,
    /// Issue to invalidation complete.
    pub flush_latency: f64,
    /// Time the flush unit is busy per flush.
    pub flush_occupancy: f64,
    /// Front-end cost of one non-NOP instruction.
    pub dispatch_cost: f64,
    pub nop_cost: f64,
    pub lfence_cost: f64,
    pub mfence_cost: f64,
    pub cpuid_cost: f64,
    pub branch_obfuscation_cost: f64,
    /// Memory ops between an indirect op and the op its address depends on.
    pub indirect_dependency_distance: usize,
    /// Extra latency of each link of the address chain.
    pub index_latency: f64,
    /// Minimum spacing of activations in one bank.
    pub bank_cycle: f64,
    /// Minimum spacing of activations on the channel.
    pub channel_gap: f64,
    /// Cycles per nanosecond, for reporting.
    pub clock: f64,
}

pub const PROFILE_IDS: [&str; 4] = ["comet", "rocket", "alder", "raptor"];

impl PipelineConfig {
    fn base(name: &str, rob_size: usize, speculation_window: usize) -> Self {
        Self {
            name: name.to_string(),
            rob_size,
            speculation_window,
            load_queue_size: 72,
            fill_buffer_size: 12,
            load_latency: 60.0,
            hit_latency: 1.5,
            prefetch_issue_cost: 2.0,
            flush_latency: 40.0,
            flush_occupancy: 25.0,
            dispatch_cost: 0.25,
            nop_cost: 0.25,
            lfence_cost: 4.0,
            mfence_cost: 30.0,
            cpuid_cost: 60.0,
            branch_obfuscation_cost: 25.0,
            indirect_dependency_distance: 2,
            index_latency: 1.0,
            bank_cycle: 46.0,
            channel_gap: 12.0,
            clock: 4.0,
        }
    }

    pub fn comet() -> Self {
        Self::base("comet", 224, 40)
    }

    pub fn rocket() -> Self {
        Self::base("rocket", 352, 64)
    }

    pub fn alder() -> Self {
        Self { fill_buffer_size: 16, load_queue_size: 192, ..Self::base("alder", 512, 128) }
    }

    pub fn raptor() -> Self {
        Self { fill_buffer_size: 16, load_queue_size: 192, load_latency: 66.0, flush_latency: 52.0, ..Self::base("raptor", 512, 192) }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "comet" | "cometlake" => Ok(Self::comet()),
            "rocket" | "rocketlake" => Ok(Self::rocket()),
            "alder" | "alderlake" => Ok(Self::alder()),
            "raptor" | "raptorlake" => Ok(Self::raptor()),
            _ => Err(Error::Lookup { kind: "pipeline profile", name: name.to_string() }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speculation_window == 0 || self.speculation_window > self.rob_size {
            return Err(Error::Config(format!("{}: speculation_window must be in 1..=rob_size", self.name)));
        }
        if self.rob_size == 0 || self.load_queue_size == 0 || self.fill_buffer_size == 0 || self.indirect_dependency_distance == 0 {
            return Err(Error::Config(format!("{}: sizes and dependency distance must be >= 1", self.name)));
        }
        if self.prefetch_issue_cost >= self.load_latency {
            return Err(Error::Config(format!("{}: prefetch_issue_cost must be below load_latency", self.name)));
        }
        let times = [
            self.load_latency,
            self.hit_latency,
            self.prefetch_issue_cost,
            self.flush_latency,
            self.flush_occupancy,
            self.dispatch_cost,
            self.nop_cost,
            self.lfence_cost,
            self.mfence_cost,
            self.cpuid_cost,
            self.branch_obfuscation_cost,
            self.index_latency,
            self.bank_cycle,
            self.channel_gap,
        ];
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) || !(self.clock > 0.0) {
            return Err(Error::Config(format!("{}: timing parameters must be finite and non-negative", self.name)));
        }
        Ok(())
    }
}

/// Expands one loop body: per aggressor a hammer op then a flush, with
/// barriers after each, and an optional obfuscated branch at the loop head.
pub fn compile_primitive(
    pattern_addrs: &[u64],
    style: CodeStyle,
    hammer: HammerKind,
    barrier: BarrierPolicy,
) -> Result<Vec<Instruction>> {
    if pattern_addrs.is_empty() {
        return Err(Error::Contract("hammer pattern has no addresses".into()));
    }
    let addressing = match style {
        CodeStyle::CppIndirect => Addressing::Indirect,
        CodeStyle::AsmImmediate => Addressing::Immediate,
    };
    let hammer_kind = match hammer {
        HammerKind::Load => InstrKind::Load,
        HammerKind::Prefetch => InstrKind::Prefetch(PrefetchHint::T2),
    };
    let per_barrier = match barrier.kind {
        BarrierKind::None => 0,
        BarrierKind::Nop(k) => k as usize,
        _ => 1,
    };
    let mut out = Vec::with_capacity(pattern_addrs.len() * 2 * (1 + per_barrier) + 1);
    if barrier.obfuscate_branches {
        out.push(Instruction::plain(InstrKind::ObfuscatedBranch));
    }
    let push_barrier = |out: &mut Vec<Instruction>| match barrier.kind {
        BarrierKind::None => {}
        BarrierKind::Nop(k) => out.extend(std::iter::repeat(Instruction::plain(InstrKind::Nop)).take(k as usize)),
        BarrierKind::Lfence => out.push(Instruction::plain(InstrKind::Lfence)),
        BarrierKind::Mfence => out.push(Instruction::plain(InstrKind::Mfence)),
        BarrierKind::Cpuid => out.push(Instruction::plain(InstrKind::Cpuid)),
    };
    for &a in pattern_addrs {
        out.push(Instruction::memory(hammer_kind, a, addressing));
        push_barrier(&mut out);
        out.push(Instruction::memory(InstrKind::Flush, a, addressing));
        push_barrier(&mut out);
    }
    Ok(out)
}

/// One DRAM row activation caused by a cache fill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub time: f64,
    pub bank: u32,
    pub row: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub activations: Vec<Activation>,
    /// Loads plus prefetches.
    pub memory_ops: u64,
    /// Loads served from the cache or from a fill already in flight.
    pub hits: u64,
    pub prefetches: u64,
    /// Prefetches ignored because their line was cached, in flight, or being flushed.
    pub dropped_prefetches: u64,
    pub cache_miss_rate: f64,
    pub elapsed: f64,
    /// Dispatch time of the first instruction of each loop iteration, plus the
    /// end time; empty for streams not built by [`execute_loop`].
    pub iteration_starts: Vec<f64>,
}

impl ExecutionTrace {
    pub fn activated(&self) -> u64 {
        self.activations.len() as u64
    }

    /// Activations per nanosecond over the whole trace.
    pub fn activation_rate(&self) -> f64 {
        if self.elapsed > 0.0 {
            self.activations.len() as f64 / self.elapsed
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Default, Clone)]
struct LineHistory {
    /// (request, ready) of fills.
    fills: Vec<(f64, f64)>,
    /// (dispatch, done) of flushes.
    flushes: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineState {
    Absent,
    Present,
    FillPending,
    FlushPending,
}

const HISTORY: usize = 8;

impl LineHistory {
    fn state_at(&self, t: f64) -> LineState {
        if self.flushes.iter().any(|&(i, d)| i <= t && t < d) {
            return LineState::FlushPending;
        }
        if self.fills.iter().any(|&(s, r)| s <= t && t < r) {
            return LineState::FillPending;
        }
        let last_fill = self.fills.iter().filter(|f| f.1 <= t).map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let last_flush = self.flushes.iter().filter(|f| f.1 <= t).map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        if last_fill > last_flush {
            LineState::Present
        } else {
            LineState::Absent
        }
    }

    /// Ready time of a fill in flight at `t`, if any.
    fn pending_fill(&self, t: f64) -> Option<f64> {
        self.fills.iter().filter(|&&(s, r)| s <= t && t < r).map(|f| f.1).reduce(f64::max)
    }

    fn push_fill(&mut self, requested: f64, ready: f64) {
        if self.fills.len() == HISTORY {
            self.fills.remove(0);
        }
        self.fills.push((requested, ready));
    }

    fn push_flush(&mut self, issue: f64, done: f64) {
        if self.flushes.len() == HISTORY {
            self.flushes.remove(0);
        }
        self.flushes.push((issue, done));
    }
}

/// Pool of identical resources, each busy until a time.
struct SlotPool {
    busy: BinaryHeap<Reverse<OrdF64>>,
    size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl SlotPool {
    fn new(size: usize) -> Self {
        Self { busy: BinaryHeap::with_capacity(size), size }
    }

    /// Earliest time at or after `t` when a slot is free.
    fn available(&mut self, t: f64) -> f64 {
        while let Some(&Reverse(OrdF64(free))) = self.busy.peek() {
            if free <= t {
                self.busy.pop();
            } else {
                break;
            }
        }
        if self.busy.len() < self.size {
            t
        } else {
            self.busy.peek().expect("pool full").0 .0
        }
    }

    fn acquire(&mut self, t: f64, until: f64) {
        while let Some(&Reverse(OrdF64(free))) = self.busy.peek() {
            if free <= t {
                self.busy.pop();
            } else {
                break;
            }
        }
        debug_assert!(self.busy.len() < self.size);
        self.busy.push(Reverse(OrdF64(until)));
    }
}

struct Dram<'a> {
    mapping: &'a AddressMapping,
    bank_free: HashMap<u64, f64>,
    channel_free: f64,
    bank_cycle: f64,
    channel_gap: f64,
    latency: f64,
}

impl Dram<'_> {
    /// Schedules a fill requested at `t`; returns (activation time, ready time).
    fn fill(&mut self, addr: u64, t: f64, out: &mut Vec<Activation>) -> (f64, f64) {
        let bank = self.mapping.bank_of(addr);
        let free = self.bank_free.entry(bank).or_insert(f64::NEG_INFINITY);
        let start = t.max(*free).max(self.channel_free);
        *free = start + self.bank_cycle;
        self.channel_free = start + self.channel_gap;
        out.push(Activation { time: start, bank: bank as u32, row: self.mapping.row_of(addr) as u32 });
        (start, start + self.latency)
    }
}

/// Runs `stream` once. Targets must lie inside `mapping`'s address space.
pub fn execute(stream: &[Instruction], config: &PipelineConfig, mapping: &AddressMapping) -> Result<ExecutionTrace> {
    execute_marked(stream, config, mapping, &[])
}

/// Runs `body` `iterations` times back to back and records iteration starts.
pub fn execute_loop(
    body: &[Instruction],
    iterations: usize,
    config: &PipelineConfig,
    mapping: &AddressMapping,
) -> Result<ExecutionTrace> {
    let mut stream = Vec::with_capacity(body.len() * iterations);
    let mut marks = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        marks.push(stream.len());
        stream.extend_from_slice(body);
    }
    execute_marked(&stream, config, mapping, &marks)
}

fn execute_marked(
    stream: &[Instruction],
    config: &PipelineConfig,
    mapping: &AddressMapping,
    marks: &[usize],
) -> Result<ExecutionTrace> {
    config.validate()?;
    for ins in stream {
        ins.validate()?;
        if let Some(a) = ins.target {
            if a >> mapping.addr_width() != 0 {
                return Err(Error::Model(format!("target {a:#x} is outside the {}-bit address space", mapping.addr_width())));
            }
        }
    }

    let c = config;
    let rob = c.rob_size;
    let mut retire_ring = vec![f64::NEG_INFINITY; rob];
    let mut last_dispatch = 0.0f64;
    let mut last_retire = 0.0f64;
    let mut first = true;

    let mut lines: HashMap<u64, LineHistory> = HashMap::new();
    // latest hammer-op resolution per line, for flush ordering
    let mut hammer_resolved: HashMap<u64, f64> = HashMap::new();
    let mut fill_buffers = SlotPool::new(c.fill_buffer_size);
    let mut load_queue = SlotPool::new(c.load_queue_size);
    let mut dram = Dram {
        mapping,
        bank_free: HashMap::new(),
        channel_free: f64::NEG_INFINITY,
        bank_cycle: c.bank_cycle,
        channel_gap: c.channel_gap,
        latency: c.load_latency,
    };

    // ready times of recent memory-op addresses, for the indirect chain
    let mut addr_ring = vec![0.0f64; c.indirect_dependency_distance];
    let mut mem_index = 0usize;

    let mut last_load_issue = f64::NEG_INFINITY;
    let mut last_prefetch_issue = f64::NEG_INFINITY;
    let mut flush_unit_free = f64::NEG_INFINITY;
    let mut max_flush_done = f64::NEG_INFINITY;
    let mut max_complete = f64::NEG_INFINITY;
    let mut max_fill_ready = f64::NEG_INFINITY;
    let mut max_issue = f64::NEG_INFINITY;
    let mut lfence_until = f64::NEG_INFINITY;
    let mut block_until = f64::NEG_INFINITY;

    let mut activations = Vec::new();
    let (mut memory_ops, mut hits, mut prefetches, mut dropped) = (0u64, 0u64, 0u64, 0u64);
    let mut starts = Vec::with_capacity(marks.len() + 1);
    let mut next_mark = 0usize;

    for (i, ins) in stream.iter().enumerate() {
        let cost = if ins.kind == InstrKind::Nop { c.nop_cost } else { c.dispatch_cost };
        let dispatch = if first { 0.0 } else { last_dispatch + cost };
        let dispatch = dispatch.max(retire_ring[i % rob]);
        first = false;
        last_dispatch = dispatch;
        if next_mark < marks.len() && marks[next_mark] == i {
            starts.push(dispatch);
            next_mark += 1;
        }

        let complete = match ins.kind {
            InstrKind::Nop => dispatch,
            InstrKind::Lfence => {
                let r = dispatch.max(max_complete) + c.lfence_cost;
                lfence_until = lfence_until.max(r);
                r
            }
            InstrKind::Mfence | InstrKind::Cpuid => {
                let cost = if ins.kind == InstrKind::Mfence { c.mfence_cost } else { c.cpuid_cost };
                let r = dispatch.max(max_complete).max(max_fill_ready).max(max_flush_done) + cost;
                block_until = block_until.max(r);
                r
            }
            InstrKind::ObfuscatedBranch => {
                let r = dispatch.max(max_issue) + c.branch_obfuscation_cost;
                block_until = block_until.max(r);
                r
            }
            kind => {
                let addr = ins.target.expect("validated");
                let line = addr / LINE_BYTES;
                let slot = mem_index % c.indirect_dependency_distance;
                let addr_ready = match ins.addressing {
                    Addressing::Immediate => dispatch,
                    Addressing::Indirect => {
                        let prev = if mem_index >= c.indirect_dependency_distance { addr_ring[slot] } else { 0.0 };
                        dispatch.max(prev + c.index_latency).max(lfence_until)
                    }
                };
                addr_ring[slot] = addr_ready;
                mem_index += 1;
                let window = if i >= c.speculation_window { retire_ring[(i - c.speculation_window) % rob] } else { f64::NEG_INFINITY };
                let earliest = addr_ready.max(block_until).max(window);
                let hist = lines.entry(line).or_default();
                match kind {
                    InstrKind::Prefetch(_) => {
                        memory_ops += 1;
                        prefetches += 1;
                        let mut t = earliest.max(last_prefetch_issue);
                        let mut state = hist.state_at(t);
                        if state == LineState::Absent {
                            t = fill_buffers.available(t);
                            state = hist.state_at(t);
                        }
                        match state {
                            // ignored: the line is cached, being evicted, or already on its way
                            LineState::Present | LineState::FlushPending | LineState::FillPending => {
                                dropped += 1;
                            }
                            LineState::Absent => {
                                let (_, ready) = dram.fill(addr, t, &mut activations);
                                fill_buffers.acquire(t, ready);
                                hist.push_fill(t, ready);
                                max_fill_ready = max_fill_ready.max(ready);
                            }
                        }
                        last_prefetch_issue = t;
                        max_issue = max_issue.max(t);
                        hammer_resolved.insert(line, t);
                        t + c.prefetch_issue_cost
                    }
                    InstrKind::Load => {
                        memory_ops += 1;
                        // loads are ordered behind every older flush
                        let mut t = earliest.max(last_load_issue).max(lfence_until).max(max_flush_done);
                        t = load_queue.available(t);
                        let data = match hist.state_at(t) {
                            LineState::Present => {
                                hits += 1;
                                t + c.hit_latency
                            }
                            LineState::FillPending => {
                                hits += 1;
                                hist.pending_fill(t).expect("pending") + c.hit_latency
                            }
                            LineState::Absent | LineState::FlushPending => {
                                let t2 = fill_buffers.available(t);
                                let (_, ready) = dram.fill(addr, t2, &mut activations);
                                fill_buffers.acquire(t2, ready);
                                hist.push_fill(t2, ready);
                                max_fill_ready = max_fill_ready.max(ready);
                                ready + c.hit_latency
                            }
                        };
                        load_queue.acquire(t, data);
                        last_load_issue = t;
                        max_issue = max_issue.max(t);
                        hammer_resolved.insert(line, data);
                        data
                    }
                    InstrKind::Flush => {
                        let after_hammer = hammer_resolved.get(&line).copied().unwrap_or(f64::NEG_INFINITY);
                        let t = earliest.max(flush_unit_free).max(after_hammer);
                        flush_unit_free = t + c.flush_occupancy;
                        let done = (t + c.flush_latency).max(hist.pending_fill(t).unwrap_or(f64::NEG_INFINITY));
                        // pending from dispatch: younger prefetches that overtake it are ignored
                        hist.push_flush(dispatch, done);
                        max_flush_done = max_flush_done.max(done);
                        max_issue = max_issue.max(t);
                        done
                    }
                    _ => unreachable!(),
                }
            }
        };
        max_complete = max_complete.max(complete);
        let retire = last_retire.max(complete);
        last_retire = retire;
        retire_ring[i % rob] = retire;
    }
    let elapsed = if stream.is_empty() { 0.0 } else { last_retire.max(max_fill_ready).max(max_flush_done).max(0.0) };
    if !marks.is_empty() {
        starts.push(elapsed);
    }
    activations.sort_by(|a, b| a.time.total_cmp(&b.time));
    let cache_miss_rate = if memory_ops == 0 { 0.0 } else { activations.len() as f64 / memory_ops as f64 };
    Ok(ExecutionTrace {
        activations,
        memory_ops,
        hits,
        prefetches,
        dropped_prefetches: dropped,
        cache_miss_rate,
        elapsed,
        iteration_starts: starts,
    })
}
