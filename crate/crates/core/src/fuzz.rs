//! Non-uniform hammer patterns and the campaigns that search them:
//! fuzzing, sweeping, NOP tuning and the strategy comparison matrix.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dram::AddressMapping;
use crate::hammer::{run_dimm, steady_state_activations, DimmProfile, FlipEvent, TrrConfig};
use crate::seed::{derive, derive_index, indexed_stream, mix64};
use crate::uarch::{compile_primitive, execute_loop, BarrierKind, BarrierPolicy, CodeStyle, HammerKind, PipelineConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternAggressor {
    /// Row offset from the replica's base row.
    pub offset: u32,
    /// Occurrences per period.
    pub frequency: u32,
    /// Start slot within the first occurrence interval.
    pub phase: u32,
    /// Back-to-back repetitions per occurrence.
    pub amplitude: u32,
    /// Aggressors sharing a group are accessed together, in list order.
    pub group: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HammerPattern {
    pub aggressors: Vec<PatternAggressor>,
    /// Slots in one period; occurrence starts are spread over these.
    pub base_period: u32,
    /// tREFI intervals one period is sized for.
    pub refresh_intervals: u32,
    pub bank_count: u32,
}

impl HammerPattern {
    /// Plain double-sided pair around `offset + 1`.
    pub fn double_sided(offset: u32) -> Self {
        let a = |o| PatternAggressor { offset: o, frequency: 1, phase: 0, amplitude: 1, group: 0 };
        Self { aggressors: vec![a(offset), a(offset + 2)], base_period: 2, refresh_intervals: 1, bank_count: 1 }
    }

    pub fn with_banks(&self, bank_count: u32) -> Self {
        Self { bank_count, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggressors.is_empty() || self.base_period == 0 || self.bank_count == 0 {
            return Err(Error::Contract("pattern needs aggressors, a period and at least one bank".into()));
        }
        let mut seen = HashSet::new();
        for a in &self.aggressors {
            if !seen.insert(a.offset) {
                return Err(Error::Contract(format!("row offset {} appears twice", a.offset)));
            }
            if a.frequency == 0 || a.amplitude == 0 || a.frequency > self.base_period {
                return Err(Error::Contract("frequency and amplitude must be >= 1 and frequency <= period".into()));
            }
            if a.phase >= self.base_period / a.frequency {
                return Err(Error::Contract("phase must fall inside the first occurrence interval".into()));
            }
        }
        Ok(())
    }

    /// Largest row offset plus one.
    pub fn span(&self) -> u32 {
        self.aggressors.iter().map(|a| a.offset + 1).max().unwrap_or(0)
    }

    /// Accesses per bank replica in one period.
    pub fn accesses_per_period(&self) -> u64 {
        self.aggressors.iter().map(|a| a.frequency as u64 * a.amplitude as u64).sum()
    }

    /// Offsets of one period in access order.
    pub fn schedule(&self) -> Result<Vec<u32>> {
        self.validate()?;
        // (slot, group, repetition, position in list)
        let mut events: Vec<(u32, u32, u32, usize)> = Vec::with_capacity(self.accesses_per_period() as usize);
        for (i, a) in self.aggressors.iter().enumerate() {
            let interval = self.base_period / a.frequency;
            for j in 0..a.frequency {
                let slot = a.phase + j * interval;
                for rep in 0..a.amplitude {
                    events.push((slot, a.group, rep, i));
                }
            }
        }
        events.sort_unstable();
        Ok(events.into_iter().map(|e| self.aggressors[e.3].offset).collect())
    }

    /// Stable identity used for uniqueness checks.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("pattern serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| mix64(h ^ b as u64))
    }
}

/// Where one bank replica of a pattern is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub bank: u32,
    pub base_row: u32,
}

/// Physical addresses of one period; bank replicas interleaved round-robin.
pub fn materialize(pattern: &HammerPattern, bases: &[Placement], mapping: &AddressMapping) -> Result<Vec<u64>> {
    if bases.len() != pattern.bank_count as usize {
        return Err(Error::Contract(format!("{} placements for a {}-bank pattern", bases.len(), pattern.bank_count)));
    }
    let order = pattern.schedule()?;
    let rows = mapping.rows_per_bank();
    let mut per_bank = Vec::with_capacity(bases.len());
    for p in bases {
        if p.bank as u64 >= mapping.num_banks() {
            return Err(Error::Placement(format!("bank {} does not exist", p.bank)));
        }
        if p.base_row as u64 + pattern.span() as u64 > rows {
            return Err(Error::Placement(format!("rows {}..{} exceed the bank's {rows} rows", p.base_row, p.base_row as u64 + pattern.span() as u64)));
        }
        let addrs = order
            .iter()
            .map(|&off| mapping.address_of(p.bank as u64, (p.base_row + off) as u64, 0))
            .collect::<Result<Vec<_>>>()?;
        per_bank.push(addrs);
    }
    let mut out = Vec::with_capacity(order.len() * bases.len());
    for i in 0..order.len() {
        for b in &per_bank {
            out.push(b[i]);
        }
    }
    Ok(out)
}

/// Random pattern ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub min_aggressors: u32,
    pub max_aggressors: u32,
    /// Bank activations that fit in one tREFI; sizes the period.
    pub slots_per_trefi: u32,
    pub max_refresh_intervals: u32,
    pub max_amplitude: u32,
    /// Base rows of aggressor groups are drawn from `0..row_window`.
    pub row_window: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { min_aggressors: 4, max_aggressors: 32, slots_per_trefi: 170, max_refresh_intervals: 2, max_amplitude: 4, row_window: 256 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_aggressors == 0 || self.min_aggressors > self.max_aggressors {
            return Err(Error::Config("aggressor count range is empty".into()));
        }
        if self.max_refresh_intervals == 0 || self.max_amplitude == 0 {
            return Err(Error::Config("refresh intervals and amplitude must be >= 1".into()));
        }
        if self.slots_per_trefi < self.max_aggressors {
            return Err(Error::Config("slots_per_trefi must fit every aggressor once".into()));
        }
        if self.row_window < 2 * self.max_aggressors + 2 {
            return Err(Error::Config("row_window too small for the aggressor count".into()));
        }
        Ok(())
    }

    /// Aggressors come in double-sided pairs sharing frequency, phase and
    /// amplitude; an odd count leaves one single.
    pub fn generate<R: Rng>(&self, rng: &mut R) -> HammerPattern {
        let n = rng.gen_range(self.min_aggressors..=self.max_aggressors);
        let refresh_intervals = rng.gen_range(1..=self.max_refresh_intervals);
        let period = refresh_intervals * self.slots_per_trefi;
        let groups = n.div_ceil(2);

        // non-overlapping group starts, stepped by 4 so pairs never touch
        let starts = sample(rng, (self.row_window / 4) as usize, groups as usize);
        let mut starts: Vec<u32> = starts.into_iter().map(|s| s as u32 * 4).collect();
        starts.sort_unstable();

        let mut params: Vec<(u32, u32)> = (0..groups)
            .map(|_| {
                let max_exp = (period as f64).log2().floor() as u32;
                let frequency = 1u32 << rng.gen_range(0..=max_exp.min(4));
                let amplitude = rng.gen_range(1..=self.max_amplitude);
                (frequency, amplitude)
            })
            .collect();
        let members = |g: u32| if g + 1 == groups && n % 2 == 1 { 1 } else { 2 };
        // shrink until one period fits in its slots
        loop {
            let total: u32 = params.iter().enumerate().map(|(g, &(f, a))| f * a * members(g as u32)).sum();
            if total <= period {
                break;
            }
            let g = (0..params.len()).max_by_key(|&g| (params[g].0 * params[g].1, g)).expect("groups >= 1");
            let (f, a) = &mut params[g];
            if *a > 1 {
                *a -= 1;
            } else {
                *f /= 2;
            }
        }
        let mut aggressors = Vec::with_capacity(n as usize);
        for (g, (&start, &(frequency, amplitude))) in starts.iter().zip(&params).enumerate() {
            let phase = rng.gen_range(0..period / frequency);
            for m in 0..members(g as u32) {
                aggressors.push(PatternAggressor { offset: start + 2 * m, frequency, phase, amplitude, group: g as u32 });
            }
        }
        HammerPattern { aggressors, base_period: period, refresh_intervals, bank_count: 1 }
    }
}

/// Everything a trial needs besides the pattern and its placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub pipeline: PipelineConfig,
    pub dimm: DimmProfile,
    pub hammer: HammerKind,
    pub style: CodeStyle,
    pub barrier: BarrierPolicy,
    /// Virtual duration of one trial, in tREFI.
    pub trial_trefi: u32,
    /// Trial locations per fuzzed pattern.
    pub locations: usize,
    pub generator: GeneratorConfig,
}

pub const DEFAULT_TRIAL_TREFI: u32 = 64;

impl SimConfig {
    /// Prefetch hammering with immediate addresses and no barrier on the
    /// named CPU profile and DIMM preset.
    pub fn new(profile: &str, dimm_preset: &str, trr: TrrConfig) -> Result<Self> {
        Ok(Self {
            pipeline: PipelineConfig::profile(profile)?,
            dimm: DimmProfile::for_preset(dimm_preset, trr)?,
            hammer: HammerKind::Prefetch,
            style: CodeStyle::AsmImmediate,
            barrier: BarrierPolicy::NONE,
            trial_trefi: DEFAULT_TRIAL_TREFI,
            locations: 3,
            generator: GeneratorConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.dimm.validate()?;
        self.generator.validate()?;
        if self.trial_trefi == 0 || self.locations == 0 {
            return Err(Error::Config("trial_trefi and locations must be >= 1".into()));
        }
        Ok(())
    }

    fn duration(&self) -> f64 {
        self.trial_trefi as f64 * self.dimm.trefi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub placements: Vec<Placement>,
    pub flips: Vec<FlipEvent>,
    /// Mean steady-state activations per tREFI per hammered bank.
    pub activation_rate: f64,
    pub miss_rate: f64,
}

/// Runs one pattern at one placement: pipeline, steady-state tiling, DIMM.
pub fn run_trial(pattern: &HammerPattern, placements: &[Placement], sim: &SimConfig, dimm_seed: u64) -> Result<TrialOutcome> {
    let mapping = &sim.dimm.mapping;
    let addrs = materialize(pattern, placements, mapping)?;
    let body = compile_primitive(&addrs, sim.style, sim.hammer, sim.barrier)?;
    // enough iterations to settle, never fewer than six
    let iterations = (512usize.div_ceil(addrs.len())).max(6);
    let warmup = iterations / 3;
    let trace = execute_loop(&body, iterations, &sim.pipeline, mapping)?;
    let acts = steady_state_activations(&trace, warmup, sim.duration())?;
    let flips = run_dimm(&acts, &sim.dimm, dimm_seed)?;
    Ok(TrialOutcome {
        placements: placements.to_vec(),
        flips,
        activation_rate: acts.len() as f64 / sim.trial_trefi as f64 / placements.len() as f64,
        miss_rate: trace.cache_miss_rate,
    })
}

/// Random distinct banks and in-range base rows for one trial.
pub fn random_placements<R: Rng>(rng: &mut R, pattern: &HammerPattern, mapping: &AddressMapping) -> Result<Vec<Placement>> {
    let banks = mapping.num_banks() as usize;
    if pattern.bank_count as usize > banks {
        return Err(Error::Placement(format!("{} banks requested, {banks} available", pattern.bank_count)));
    }
    let free_rows = mapping.rows_per_bank().saturating_sub(pattern.span() as u64);
    if free_rows == 0 {
        return Err(Error::Placement("pattern is taller than a bank".into()));
    }
    Ok(sample(rng, banks, pattern.bank_count as usize)
        .into_iter()
        .map(|b| Placement { bank: b as u32, base_row: rng.gen_range(0..free_rows) as u32 })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            n += 1;
            sum += x;
            min = min.min(x);
            max = max.max(x);
        }
        if n == 0 {
            return Self::default();
        }
        Self { mean: sum / n as f64, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationResult {
    pub placements: Vec<Placement>,
    pub flips: u64,
    pub activation_rate: f64,
    pub miss_rate: f64,
}

impl From<&TrialOutcome> for LocationResult {
    fn from(t: &TrialOutcome) -> Self {
        Self { placements: t.placements.clone(), flips: t.flips.len() as u64, activation_rate: t.activation_rate, miss_rate: t.miss_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivePattern {
    pub iteration: u64,
    pub flips: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPattern {
    pub iteration: u64,
    pub pattern: HammerPattern,
    pub flips: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    /// Virtual time at the end of a location's trial, in nanoseconds.
    pub time: f64,
    pub flips: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub patterns_tried: u64,
    pub effective_patterns: Vec<EffectivePattern>,
    pub best: Option<BestPattern>,
    /// Filled by sweeps; fuzz runs leave it empty.
    pub locations: Vec<LocationResult>,
    pub cumulative: Vec<CumulativePoint>,
    pub total_flips: u64,
    pub activation_rate: Summary,
    pub miss_rate: Summary,
}

impl CampaignReport {
    pub fn effective_count(&self) -> usize {
        self.effective_patterns.len()
    }
}

struct Evaluated {
    pattern: HammerPattern,
    trials: Vec<TrialOutcome>,
}

/// Draws `budget` distinct patterns with the campaign's generator.
pub fn generate_unique(sim: &SimConfig, budget: u64, seed: u64, bank_count: u32) -> Vec<HammerPattern> {
    let mut rng = crate::seed::stream(seed, "fuzzer");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(budget as usize);
    while (out.len() as u64) < budget {
        let p = sim.generator.generate(&mut rng).with_banks(bank_count);
        if seen.insert(p.fingerprint()) {
            out.push(p);
        }
    }
    out
}

/// Fuzzes `budget` random unique patterns, each at `sim.locations` random
/// placements. Iterations run on the current rayon pool; results are merged
/// by iteration index.
pub fn fuzz(budget: u64, sim: &SimConfig, seed: u64) -> Result<CampaignReport> {
    fuzz_with_banks(budget, sim, seed, 1)
}

pub fn fuzz_with_banks(budget: u64, sim: &SimConfig, seed: u64, bank_count: u32) -> Result<CampaignReport> {
    if budget == 0 {
        return Err(Error::Contract("fuzz budget must be >= 1".into()));
    }
    sim.validate()?;
    let patterns = generate_unique(sim, budget, seed, bank_count);
    let dimm_seed = derive(seed, "dimm");
    let evaluated: Vec<Evaluated> = patterns
        .into_par_iter()
        .enumerate()
        .map(|(i, pattern)| {
            let mut rng = indexed_stream(seed, "locations", i as u64);
            let trials = (0..sim.locations)
                .map(|_| {
                    let placements = random_placements(&mut rng, &pattern, &sim.dimm.mapping)?;
                    run_trial(&pattern, &placements, sim, dimm_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Evaluated { pattern, trials })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = CampaignReport {
        patterns_tried: budget,
        effective_patterns: Vec::new(),
        best: None,
        locations: Vec::new(),
        cumulative: Vec::new(),
        total_flips: 0,
        activation_rate: Summary::of(evaluated.iter().flat_map(|e| e.trials.iter().map(|t| t.activation_rate))),
        miss_rate: Summary::of(evaluated.iter().flat_map(|e| e.trials.iter().map(|t| t.miss_rate))),
    };
    for (i, e) in evaluated.into_iter().enumerate() {
        let flips: u64 = e.trials.iter().map(|t| t.flips.len() as u64).sum();
        report.total_flips += flips;
        if flips == 0 {
            continue;
        }
        report.effective_patterns.push(EffectivePattern { iteration: i as u64, flips });
        if report.best.as_ref().map_or(true, |b| flips > b.flips) {
            report.best = Some(BestPattern { iteration: i as u64, pattern: e.pattern, flips });
        }
    }
    Ok(report)
}

/// Replays one pattern at `locations` random placements.
pub fn sweep(pattern: &HammerPattern, locations: usize, sim: &SimConfig, seed: u64) -> Result<CampaignReport> {
    sim.validate()?;
    pattern.validate()?;
    let dimm_seed = derive(seed, "dimm");
    let trials: Vec<TrialOutcome> = (0..locations)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_stream(seed, "sweep", i as u64);
            let placements = random_placements(&mut rng, pattern, &sim.dimm.mapping)?;
            run_trial(pattern, &placements, sim, dimm_seed)
        })
        .collect::<Result<_>>()?;
    let mut cumulative = Vec::with_capacity(trials.len());
    let mut total = 0;
    for (i, t) in trials.iter().enumerate() {
        total += t.flips.len() as u64;
        cumulative.push(CumulativePoint { time: (i + 1) as f64 * sim.duration(), flips: total });
    }
    Ok(CampaignReport {
        patterns_tried: 1,
        effective_patterns: if total > 0 { vec![EffectivePattern { iteration: 0, flips: total }] } else { Vec::new() },
        best: (total > 0).then(|| BestPattern { iteration: 0, pattern: pattern.clone(), flips: total }),
        activation_rate: Summary::of(trials.iter().map(|t| t.activation_rate)),
        miss_rate: Summary::of(trials.iter().map(|t| t.miss_rate)),
        locations: trials.iter().map(LocationResult::from).collect(),
        cumulative,
        total_flips: total,
    })
}

/// Fuzzes, then sweeps the `top` most effective patterns over `locations`
/// placements and returns the one with the most flips, with its sweep.
pub fn best_by_sweep(budget: u64, sim: &SimConfig, seed: u64, top: usize, locations: usize) -> Result<Option<(HammerPattern, CampaignReport)>> {
    let report = fuzz(budget, sim, seed)?;
    let mut ranked = report.effective_patterns.clone();
    ranked.sort_by(|a, b| b.flips.cmp(&a.flips).then(a.iteration.cmp(&b.iteration)));
    ranked.truncate(top);
    if ranked.is_empty() {
        return Ok(None);
    }
    let patterns = generate_unique(sim, budget, seed, 1);
    let mut best: Option<(HammerPattern, CampaignReport)> = None;
    for e in ranked {
        let p = &patterns[e.iteration as usize];
        let r = sweep(p, locations, sim, seed)?;
        if best.as_ref().map_or(true, |(_, b)| r.total_flips > b.total_flips) {
            best = Some((p.clone(), r));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NopPoint {
    pub nops: u32,
    pub flips: u64,
    pub activation_rate: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NopTuneReport {
    pub profile: String,
    pub points: Vec<NopPoint>,
    /// Smallest NOP count reaching the most flips.
    pub best_nops: u32,
}

/// Flip counts of one pattern per NOP count, at `sim.locations` fixed
/// placements shared by every count.
pub fn nop_tune(pattern: &HammerPattern, nop_counts: &[u32], sim: &SimConfig, seed: u64) -> Result<NopTuneReport> {
    if nop_counts.is_empty() {
        return Err(Error::Contract("no NOP counts to try".into()));
    }
    sim.validate()?;
    let mut rng = crate::seed::stream(seed, "nop-locations");
    let placements = (0..sim.locations)
        .map(|_| random_placements(&mut rng, pattern, &sim.dimm.mapping))
        .collect::<Result<Vec<_>>>()?;
    let dimm_seed = derive(seed, "dimm");
    let points: Vec<NopPoint> = nop_counts
        .par_iter()
        .map(|&k| {
            let cfg = SimConfig { barrier: BarrierPolicy { kind: BarrierKind::Nop(k), ..sim.barrier }, ..sim.clone() };
            let trials = placements.iter().map(|p| run_trial(pattern, p, &cfg, dimm_seed)).collect::<Result<Vec<_>>>()?;
            Ok(NopPoint {
                nops: k,
                flips: trials.iter().map(|t| t.flips.len() as u64).sum(),
                activation_rate: Summary::of(trials.iter().map(|t| t.activation_rate)).mean,
                miss_rate: Summary::of(trials.iter().map(|t| t.miss_rate)).mean,
            })
        })
        .collect::<Result<_>>()?;
    let best_nops = points.iter().rev().max_by_key(|p| p.flips).map(|p| p.nops).expect("non-empty");
    Ok(NopTuneReport { profile: sim.pipeline.name.clone(), points, best_nops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Fuzz iterations per cell.
    pub budget: u64,
    pub barriers: Vec<BarrierKind>,
    /// Bank counts tried for multi-bank cells; the best one is reported.
    pub multi_bank_counts: Vec<u32>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            budget: 50,
            barriers: vec![BarrierKind::None, BarrierKind::Nop(16), BarrierKind::Lfence, BarrierKind::Mfence],
            multi_bank_counts: (2..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCell {
    pub hammer: HammerKind,
    pub banks: BankMode,
    pub bank_count: u32,
    pub barrier: BarrierKind,
    pub total_flips: u64,
    pub best_pattern_flips: u64,
    pub effective_patterns: u64,
    pub activation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub profile: String,
    pub budget: u64,
    pub cells: Vec<StrategyCell>,
}

impl CompareReport {
    /// Best total over barriers for one strategy.
    pub fn strategy_total(&self, hammer: HammerKind, banks: BankMode) -> u64 {
        self.cells.iter().filter(|c| c.hammer == hammer && c.banks == banks).map(|c| c.total_flips).max().unwrap_or(0)
    }
}

/// Load and prefetch hammering, single- and multi-bank, under each barrier.
/// Every cell fuzzes the same pattern sequence.
pub fn compare_strategies(sim: &SimConfig, cfg: &CompareConfig, seed: u64) -> Result<CompareReport> {
    if cfg.multi_bank_counts.iter().any(|&b| b < 2) {
        return Err(Error::Config("multi-bank counts must be >= 2".into()));
    }
    let mut cells = Vec::new();
    for hammer in [HammerKind::Load, HammerKind::Prefetch] {
        for &barrier in &cfg.barriers {
            let cell_sim = SimConfig { hammer, barrier: BarrierPolicy { kind: barrier, ..sim.barrier }, ..sim.clone() };
            let cell = |banks, bank_count, r: &CampaignReport| StrategyCell {
                hammer,
                banks,
                bank_count,
                barrier,
                total_flips: r.total_flips,
                best_pattern_flips: r.best.as_ref().map_or(0, |b| b.flips),
                effective_patterns: r.effective_count() as u64,
                activation_rate: r.activation_rate.mean,
            };
            let single = fuzz_with_banks(cfg.budget, &cell_sim, seed, 1)?;
            cells.push(cell(BankMode::Single, 1, &single));
            let mut best: Option<StrategyCell> = None;
            for &b in &cfg.multi_bank_counts {
                let r = fuzz_with_banks(cfg.budget, &cell_sim, seed, b)?;
                let c = cell(BankMode::Multi, b, &r);
                if best.as_ref().map_or(true, |x| c.total_flips > x.total_flips) {
                    best = Some(c);
                }
            }
            cells.extend(best);
        }
    }
    Ok(CompareReport { profile: sim.pipeline.name.clone(), budget: cfg.budget, cells })
}

/// Seed of the `i`-th derived campaign, for multi-seed studies.
pub fn campaign_seed(root: u64, i: u64) -> u64 {
    derive_index(root, "campaign", i)
}
