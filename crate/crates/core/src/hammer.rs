//! DRAM-side disturbance model: per-row counters, staggered refresh, a
//! sampling TRR table, and per-row flip thresholds.

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::dram::{preset, preset_geometry, AddressMapping, DramGeometry};
use crate::seed::{derive, derive_index, mix64, stream, unit_from_hash, SimRng};
use crate::uarch::{Activation, ExecutionTrace};
use crate::{Error, Result};

pub const DEFAULT_TREFI_NS: f64 = 7800.0;
pub const DEFAULT_REFRESH_WINDOW: u32 = 8192;

/// Per-row activation thresholds: a normal truncated to
/// `mean * (1 ± TRUNCATION * spread)`, and the share of rows that can flip at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdModel {
    pub mean: f64,
    /// Relative standard deviation.
    pub spread: f64,
    pub flippable_fraction: f64,
}

impl ThresholdModel {
    pub const TRUNCATION: f64 = 2.5;

    pub fn bounds(&self) -> (f64, f64) {
        let w = Self::TRUNCATION * self.spread;
        ((self.mean * (1.0 - w)).max(1.0), self.mean * (1.0 + w))
    }

    fn validate(&self) -> Result<()> {
        if !(self.mean >= 1.0 && self.mean.is_finite()) {
            return Err(Error::Config("threshold mean must be >= 1".into()));
        }
        if !(0.0..0.4).contains(&self.spread) {
            return Err(Error::Config("threshold spread must be in [0, 0.4)".into()));
        }
        if !(0.0..=1.0).contains(&self.flippable_fraction) {
            return Err(Error::Config("flippable fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for ThresholdModel {
    fn default() -> Self {
        Self { mean: 1100.0, spread: 0.2, flippable_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrrConfig {
    pub enabled: bool,
    pub sampler_capacity: usize,
    pub sampling_probability: f64,
    /// Tracked aggressors whose neighbours are refreshed at each tREFI.
    pub refreshes_per_trefi: usize,
}

impl TrrConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, sampler_capacity: 1, sampling_probability: 1.0, refreshes_per_trefi: 1 }
    }

    /// Sees every activation and refreshes around everything it tracked.
    pub fn perfect() -> Self {
        Self { enabled: true, sampler_capacity: 64, sampling_probability: 1.0, refreshes_per_trefi: 64 }
    }

    /// Small table, half the activations observed, one refresh per tREFI.
    pub fn defeatable() -> Self {
        Self { enabled: true, sampler_capacity: 4, sampling_probability: 0.5, refreshes_per_trefi: 1 }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "off" | "disabled" => Ok(Self::disabled()),
            "perfect" => Ok(Self::perfect()),
            "defeatable" | "default" => Ok(Self::defeatable()),
            _ => Err(Error::Lookup { kind: "TRR preset", name: name.to_string() }),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.sampler_capacity == 0 || self.refreshes_per_trefi == 0 {
            return Err(Error::Config("TRR capacity and refreshes per tREFI must be >= 1".into()));
        }
        if !(self.sampling_probability > 0.0 && self.sampling_probability <= 1.0) {
            return Err(Error::Config("TRR sampling probability must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimmProfile {
    pub geometry: DramGeometry,
    pub mapping: AddressMapping,
    pub trefi: f64,
    pub refresh_window: u32,
    pub thresholds: ThresholdModel,
    pub blast_radius: u32,
    pub trr: TrrConfig,
}

impl DimmProfile {
    pub fn new(geometry: DramGeometry, mapping: AddressMapping, trr: TrrConfig) -> Self {
        Self {
            geometry,
            mapping,
            trefi: DEFAULT_TREFI_NS,
            refresh_window: DEFAULT_REFRESH_WINDOW,
            thresholds: ThresholdModel::default(),
            blast_radius: 1,
            trr,
        }
    }

    pub fn for_preset(name: &str, trr: TrrConfig) -> Result<Self> {
        Ok(Self::new(preset_geometry(name)?, preset(name)?, trr))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.trefi > 0.0 && self.trefi.is_finite()) {
            return Err(Error::Config("trefi must be positive".into()));
        }
        if self.refresh_window == 0 {
            return Err(Error::Config("refresh_window must be >= 1".into()));
        }
        if self.blast_radius != 1 {
            return Err(Error::Config("only a blast radius of 1 is modelled".into()));
        }
        if self.mapping.rows_per_bank() != self.geometry.rows_per_bank {
            return Err(Error::Config("mapping and geometry disagree on rows per bank".into()));
        }
        self.thresholds.validate()?;
        self.trr.validate()
    }

    fn rows_per_slice(&self) -> u64 {
        self.geometry.rows_per_bank.div_ceil(self.refresh_window as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub bank: u32,
    pub row: u32,
    pub bit: u32,
    pub direction: FlipDirection,
    pub time: f64,
}

/// Fixed per-row cell properties, drawn statelessly from the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCells {
    /// `None` when no cell in the row is vulnerable.
    pub threshold: Option<u32>,
    pub bit: u32,
    pub direction: FlipDirection,
}

pub fn row_cells(profile: &DimmProfile, seed: u64, bank: u32, row: u32) -> RowCells {
    let h = derive_index(seed, "cells", (bank as u64) << 32 | row as u64);
    let t = &profile.thresholds;
    let row_bits = (profile.geometry.row_size_bytes * 8) as u32;
    let bit_hash = mix64(h ^ 0x5bd1_e995);
    let bit = (bit_hash % row_bits as u64) as u32;
    let direction = if bit_hash >> 63 == 0 { FlipDirection::ZeroToOne } else { FlipDirection::OneToZero };
    if unit_from_hash(h) >= t.flippable_fraction {
        return RowCells { threshold: None, bit, direction };
    }
    let (lo, hi) = t.bounds();
    let threshold = if t.spread == 0.0 {
        t.mean
    } else {
        let normal = Normal::new(t.mean, t.mean * t.spread).expect("validated spread");
        let mut rng = SimRng::seed_from_u64(mix64(h));
        loop {
            let x = normal.sample(&mut rng);
            if (lo..=hi).contains(&x) {
                break x;
            }
        }
    };
    RowCells { threshold: Some(threshold.round().max(1.0) as u32), bit, direction }
}

struct Victim {
    bank: u32,
    row: u32,
    counter: u32,
    cells: RowCells,
    flipped: bool,
}

struct Aggressor {
    bank_slot: usize,
    row: u32,
    victims: [Option<u32>; 2],
}

/// Frequency table with lowest-count eviction.
struct Sampler {
    entries: Vec<(u32, u32)>,
}

impl Sampler {
    fn observe(&mut self, agg: u32, capacity: usize) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == agg) {
            e.1 += 1;
            return;
        }
        if self.entries.len() == capacity {
            // evict the least counted, oldest first on ties
            let (pos, _) = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(i, e)| (e.1, *i))
                .expect("capacity >= 1");
            self.entries.remove(pos);
        }
        self.entries.push((agg, 1));
    }

    /// Removes and returns up to `n` most counted entries.
    fn take_top(&mut self, n: usize, aggs: &[Aggressor]) -> Vec<u32> {
        self.entries.sort_by(|a, b| b.1.cmp(&a.1).then(aggs[a.0 as usize].row.cmp(&aggs[b.0 as usize].row)));
        let n = n.min(self.entries.len());
        self.entries.drain(..n).map(|e| e.0).collect()
    }
}

/// Replays time-ordered activations against one DIMM and returns the flips.
pub fn run_dimm(activations: &[Activation], profile: &DimmProfile, seed: u64) -> Result<Vec<FlipEvent>> {
    profile.validate()?;
    if let Some(i) = activations.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(Error::Contract(format!("activation {} is earlier than its predecessor", i + 1)));
    }
    let rows = profile.geometry.rows_per_bank;
    let rows_per_slice = profile.rows_per_slice();

    // dense ids for aggressors and victims
    let mut agg_ids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut victim_ids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut bank_slots: HashMap<u32, usize> = HashMap::new();
    let mut aggs: Vec<Aggressor> = Vec::new();
    let mut victims: Vec<Victim> = Vec::new();
    let mut seq: Vec<u32> = Vec::with_capacity(activations.len());
    for a in activations {
        if a.row as u64 >= rows {
            return Err(Error::Contract(format!("row {} is outside the bank", a.row)));
        }
        let next = aggs.len() as u32;
        let id = *agg_ids.entry((a.bank, a.row)).or_insert(next);
        if id == next {
            let n_slots = bank_slots.len();
            let bank_slot = *bank_slots.entry(a.bank).or_insert(n_slots);
            let mut vs = [None, None];
            let neighbours = [a.row.checked_sub(1), (a.row as u64 + 1 < rows).then_some(a.row + 1)];
            for (slot, n) in vs.iter_mut().zip(neighbours) {
                if let Some(r) = n {
                    let vnext = victims.len() as u32;
                    let vid = *victim_ids.entry((a.bank, r)).or_insert(vnext);
                    if vid == vnext {
                        victims.push(Victim { bank: a.bank, row: r, counter: 0, cells: row_cells(profile, seed, a.bank, r), flipped: false });
                    }
                    *slot = Some(vid);
                }
            }
            aggs.push(Aggressor { bank_slot, row: a.row, victims: vs });
        }
        seq.push(id);
    }
    let mut by_slice: HashMap<u64, Vec<u32>> = HashMap::new();
    for (i, v) in victims.iter().enumerate() {
        by_slice.entry(v.row as u64 / rows_per_slice).or_default().push(i as u32);
    }

    let trr = profile.trr;
    let mut samplers: Vec<Sampler> = (0..bank_slots.len()).map(|_| Sampler { entries: Vec::new() }).collect();
    let mut rng = stream(derive(seed, "trr"), "sampler");
    let geometric = (trr.enabled && trr.sampling_probability < 1.0)
        .then(|| Geometric::new(trr.sampling_probability).expect("validated probability"));
    let mut skip: u64 = geometric.as_ref().map_or(0, |g| g.sample(&mut rng));

    let mut flips = Vec::new();
    let mut boundary_index: u64 = 1;
    let mut next_boundary = profile.trefi;
    for (a, &id) in activations.iter().zip(&seq) {
        while a.time >= next_boundary {
            let slice = (boundary_index - 1) % profile.refresh_window as u64;
            if let Some(vs) = by_slice.get(&slice) {
                for &v in vs {
                    victims[v as usize].counter = 0;
                }
            }
            if trr.enabled {
                for s in samplers.iter_mut() {
                    for agg in s.take_top(trr.refreshes_per_trefi, &aggs) {
                        for v in aggs[agg as usize].victims.into_iter().flatten() {
                            victims[v as usize].counter = 0;
                        }
                    }
                }
            }
            boundary_index += 1;
            next_boundary = boundary_index as f64 * profile.trefi;
        }
        let agg = &aggs[id as usize];
        for v in agg.victims.into_iter().flatten() {
            let victim = &mut victims[v as usize];
            victim.counter += 1;
            if let Some(th) = victim.cells.threshold {
                if !victim.flipped && victim.counter >= th {
                    victim.flipped = true;
                    flips.push(FlipEvent {
                        bank: victim.bank,
                        row: victim.row,
                        bit: victim.cells.bit,
                        direction: victim.cells.direction,
                        time: a.time,
                    });
                }
            }
        }
        if trr.enabled {
            if skip == 0 {
                samplers[agg.bank_slot].observe(id, trr.sampler_capacity);
                skip = geometric.as_ref().map_or(0, |g| g.sample(&mut rng));
            } else {
                skip -= 1;
            }
        }
    }
    Ok(flips)
}

pub fn write_flips_jsonl<W: Write>(flips: &[FlipEvent], mut out: W) -> Result<()> {
    for f in flips {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRate {
    pub bank: u32,
    pub per_trefi: f64,
    /// Activations in each tREFI interval of the trace.
    pub histogram: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRate {
    pub trefi: f64,
    pub intervals: usize,
    pub banks: Vec<BankRate>,
    /// Mean over the banks that saw activations.
    pub per_bank: f64,
    pub total_per_trefi: f64,
}

/// Activations per tREFI per bank over the trace's elapsed time.
pub fn measure_activation_rate(trace: &ExecutionTrace, profile: &DimmProfile) -> ActivationRate {
    let last = trace.activations.last().map_or(0.0, |a| a.time);
    let span = trace.elapsed.max(last);
    if trace.activations.is_empty() || span <= 0.0 {
        return ActivationRate { trefi: profile.trefi, intervals: 0, banks: Vec::new(), per_bank: 0.0, total_per_trefi: 0.0 };
    }
    let intervals = ((span / profile.trefi).ceil() as usize).max(1);
    let mut per: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for a in &trace.activations {
        let slot = ((a.time / profile.trefi) as usize).min(intervals - 1);
        per.entry(a.bank).or_insert_with(|| vec![0; intervals])[slot] += 1;
    }
    let windows = span / profile.trefi;
    let banks: Vec<BankRate> = per
        .into_iter()
        .map(|(bank, histogram)| BankRate { bank, per_trefi: histogram.iter().sum::<u32>() as f64 / windows, histogram })
        .collect();
    let total_per_trefi = trace.activations.len() as f64 / windows;
    ActivationRate { trefi: profile.trefi, intervals, per_bank: total_per_trefi / banks.len() as f64, banks, total_per_trefi }
}

/// Repeats the steady-state part of a looped trace (iterations from `warmup`
/// on) until `duration` nanoseconds are covered.
pub fn steady_state_activations(trace: &ExecutionTrace, warmup: usize, duration: f64) -> Result<Vec<Activation>> {
    let starts = &trace.iteration_starts;
    // starts holds one entry per iteration plus the end time
    if starts.len() < warmup + 3 {
        return Err(Error::Contract(format!("need more than {} looped iterations to find a steady state", warmup + 1)));
    }
    let from = starts[warmup];
    let to = starts[starts.len() - 2];
    let period = to - from;
    if period <= 0.0 {
        return Ok(Vec::new());
    }
    let mut offsets: Vec<Activation> = trace
        .activations
        .iter()
        .filter(|a| a.time >= from && a.time < to)
        .map(|a| Activation { time: a.time - from, ..*a })
        .collect();
    offsets.sort_by(|a, b| a.time.total_cmp(&b.time));
    if offsets.is_empty() {
        return Ok(offsets);
    }
    let reps = (duration / period).ceil() as usize;
    let mut out = Vec::with_capacity(offsets.len() * reps);
    'tile: for r in 0..reps {
        let base = r as f64 * period;
        for a in &offsets {
            let t = base + a.time;
            if t >= duration {
                break 'tile;
            }
            out.push(Activation { time: t, ..*a });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(trr: TrrConfig) -> DimmProfile {
        DimmProfile::for_preset("cometlake-8g", trr).unwrap()
    }

    /// Evenly spaced activations cycling through `rows` in bank 0.
    fn cyclic(rows: &[u32], spacing: f64, count: usize) -> Vec<Activation> {
        (0..count).map(|i| Activation { time: i as f64 * spacing, bank: 0, row: rows[i % rows.len()] }).collect()
    }

    fn fixed_thresholds(p: &mut DimmProfile, mean: f64) {
        p.thresholds = ThresholdModel { mean, spread: 0.0, flippable_fraction: 1.0 };
    }

    #[test]
    fn double_sided_without_trr_flips_at_the_threshold() {
        let mut p = profile(TrrConfig::disabled());
        fixed_thresholds(&mut p, 500.0);
        // victim 101 gets one increment per activation of 100 or 102
        let acts = cyclic(&[100, 102], 50.0, 499);
        assert!(run_dimm(&acts, &p, 1).unwrap().iter().all(|f| f.row != 101));
        let acts = cyclic(&[100, 102], 50.0, 500);
        let flips = run_dimm(&acts, &p, 1).unwrap();
        let middle: Vec<_> = flips.iter().filter(|f| f.row == 101).collect();
        assert_eq!(middle.len(), 1);
        assert_eq!(middle[0].time, 499.0 * 50.0);
        // the outer victims see half the pressure
        assert!(flips.iter().all(|f| f.row == 101));
    }

    #[test]
    fn uniform_double_sided_never_beats_the_defeatable_sampler() {
        let p = profile(TrrConfig::defeatable());
        let (lo, _) = p.thresholds.bounds();
        // bank-limited rate: one activation every 46 ns
        let acts = cyclic(&[2000, 2002], 46.0, 64 * 170);
        assert!(lo > 170.0);
        for seed in 0..100 {
            assert!(run_dimm(&acts, &p, seed).unwrap().is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn no_activations_no_flips() {
        assert!(run_dimm(&[], &profile(TrrConfig::disabled()), 3).unwrap().is_empty());
    }

    #[test]
    fn unordered_events_are_a_contract_error() {
        let acts = [Activation { time: 10.0, bank: 0, row: 5 }, Activation { time: 5.0, bank: 0, row: 7 }];
        assert_eq!(run_dimm(&acts, &profile(TrrConfig::disabled()), 0).unwrap_err().category(), "contract");
    }

    #[test]
    fn scheduled_refresh_resets_counters() {
        let mut p = profile(TrrConfig::disabled());
        fixed_thresholds(&mut p, 300.0);
        p.refresh_window = 1; // every row refreshed at every boundary
        let spacing = p.trefi / 200.0;
        let acts = cyclic(&[10, 12], spacing, 200 * 20);
        assert!(run_dimm(&acts, &p, 0).unwrap().is_empty());
    }

    #[test]
    fn edge_rows_have_one_neighbour() {
        let mut p = profile(TrrConfig::disabled());
        fixed_thresholds(&mut p, 10.0);
        let top = (p.geometry.rows_per_bank - 1) as u32;
        let acts = cyclic(&[0, top], 50.0, 40);
        let mut rows: Vec<u32> = run_dimm(&acts, &p, 0).unwrap().iter().map(|f| f.row).collect();
        rows.sort();
        assert_eq!(rows, vec![1, top - 1]);
    }

    #[test]
    fn perfect_sampler_stops_many_sided_patterns() {
        let p = profile(TrrConfig::perfect());
        let rows: Vec<u32> = (0..24).map(|i| 4000 + 2 * i).collect();
        let acts = cyclic(&rows, 46.0, 170 * 128);
        for seed in 0..10 {
            assert!(run_dimm(&acts, &p, seed).unwrap().is_empty());
        }
        let off = profile(TrrConfig::disabled());
        let mut heavy = p.clone();
        heavy.trr = off.trr;
        assert!(!run_dimm(&cyclic(&[4000, 4002], 46.0, 170 * 128), &heavy, 1).unwrap().is_empty());
    }

    #[test]
    fn row_cells_are_deterministic_and_bounded() {
        let p = profile(TrrConfig::disabled());
        let (lo, hi) = p.thresholds.bounds();
        let mut flippable = 0;
        for row in 0..2000 {
            let c = row_cells(&p, 9, 1, row);
            assert_eq!(c, row_cells(&p, 9, 1, row));
            assert!(c.bit < 8192 * 8);
            if let Some(t) = c.threshold {
                flippable += 1;
                assert!((lo.floor() as u32..=hi.ceil() as u32).contains(&t));
            }
        }
        // 30% flippable; binomial sd over 2000 rows is about 20
        assert!((500..700).contains(&flippable), "{flippable}");
    }

    #[test]
    fn rate_of_a_synthetic_trace() {
        let acts: Vec<Activation> = (0..780).map(|i| Activation { time: i as f64 * 100.0, bank: (i % 3) as u32, row: 9 }).collect();
        let t = ExecutionTrace {
            activations: acts,
            memory_ops: 780,
            hits: 0,
            prefetches: 0,
            dropped_prefetches: 0,
            cache_miss_rate: 1.0,
            elapsed: 78_000.0,
            iteration_starts: vec![],
        };
        let r = measure_activation_rate(&t, &profile(TrrConfig::disabled()));
        assert!((r.total_per_trefi - 78.0).abs() < 1e-9);
        assert_eq!(r.banks.len(), 3);
        for b in &r.banks {
            assert!((b.per_trefi - 26.0).abs() < 0.5);
            assert_eq!(b.histogram.len(), 10);
        }
    }

    #[test]
    fn steady_state_tiles_the_loop() {
        use crate::uarch::*;
        let m = preset("cometlake-8g").unwrap();
        let addrs: Vec<u64> = (0..4).map(|i| m.address_of(0, 300 + 2 * i, 0).unwrap()).collect();
        let body = compile_primitive(&addrs, CodeStyle::AsmImmediate, HammerKind::Prefetch, BarrierPolicy::nop(8)).unwrap();
        let t = execute_loop(&body, 12, &PipelineConfig::comet(), &m).unwrap();
        let tiled = steady_state_activations(&t, 4, 100_000.0).unwrap();
        assert!(tiled.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(tiled.last().unwrap().time < 100_000.0);
        // one activation per aggressor per loop iteration
        let period = t.iteration_starts[11] - t.iteration_starts[4];
        let per_iter = tiled.len() as f64 / (100_000.0 / (period / 7.0));
        assert!((per_iter - 4.0).abs() < 0.2, "{per_iter}");
        assert!(steady_state_activations(&t, 11, 1.0).is_err());
    }

    #[test]
    fn flips_export_as_json_lines() {
        let f = FlipEvent { bank: 1, row: 2, bit: 3, direction: FlipDirection::OneToZero, time: 4.5 };
        let mut buf = Vec::new();
        write_flips_jsonl(&[f, f], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: FlipEvent = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
