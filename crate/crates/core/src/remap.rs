//! Bank-function and row-bit recovery from conflict timing alone.
//!
//! The engine works through differing-bit sets of growing size:
//!
//! 1. single bits: a slow single-bit flip can only be a row bit outside
//!    every bank function ("pure row bit");
//! 2. pairs ("duet"): a slow pair shares a function and touches a row bit;
//!    the higher bit of each such pair is a row bit;
//! 3. triples ("trios"): starting from a borrowed slow pair, adding a
//!    non-row bit that makes the access fast marks it as a bank bit;
//! 4. quadruples ("quartet"): adding two such bank bits keeps the access slow
//!    exactly when both belong to the same function.
//!
//! Slow pairs are finally merged into functions by connected components.
//! [`brute_force_baseline`] is an independent, exhaustive recovery used as an
//! oracle and for search-cost comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::{binomial, bits_of, mask_of, Gf2Basis};
use crate::dram::{AddressMapping, BankFunction, BitRange};
use crate::error::{Error, Result};
use crate::probe::{
    estimate_threshold, measure_t_sbdr, pair_latency_grid, LatencyGrid, LatencyModel, MemoryPool, Probe, SimulatedProbe,
    ThresholdEstimate, DEFAULT_POOL_COVERAGE,
};
use crate::seed::{derive, stream};

pub type BitPair = (u8, u8);

/// Knobs for [`recover`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    /// Random address pairs averaged per timing measurement.
    pub pairs: u32,
    /// Alternating accesses per pair.
    pub reps: u32,
    /// Pairs measured individually to place the threshold.
    pub threshold_samples: usize,
    /// Largest differing-bit set the engine may use (2..=4).
    pub max_diff_bits: u8,
    /// Rerun the trios/quartet steps with a second borrowed pair and compare.
    pub cross_validate: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self { pairs: 16, reps: 50, threshold_samples: 5000, max_diff_bits: 4, cross_validate: true }
    }
}

/// Working sets of one recovery run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryState {
    pub threshold: f64,
    pub pure_row_bits: BTreeSet<u8>,
    /// Bits left after removing pure row bits.
    pub candidate_bits: BTreeSet<u8>,
    pub bank_func_pairs: BTreeSet<BitPair>,
    pub row_bits: BTreeSet<u8>,
    pub non_row_bank_bits: BTreeSet<u8>,
    pub merged_functions: Vec<Vec<u8>>,
}

/// Measurement log of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: String,
    pub probes: u64,
    pub elapsed_us: u64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub recovered: AddressMapping,
    /// Timing measurements over differing-bit sets (threshold sampling excluded).
    pub probe_count: u64,
    pub threshold: ThresholdEstimate,
    pub state: RecoveryState,
    pub steps: Vec<StepLog>,
    pub warnings: Vec<String>,
    pub elapsed_ms: f64,
}

impl RecoveryReport {
    /// Equality that ignores wall-clock fields.
    pub fn same_outcome(&self, other: &RecoveryReport) -> bool {
        self.recovered == other.recovered
            && self.probe_count == other.probe_count
            && self.state == other.state
            && self.threshold == other.threshold
            && self.warnings == other.warnings
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| a.step == b.step && a.probes == b.probes && a.note == b.note)
    }
}

/// Classifies differing-bit sets as slow (same bank, different row) or fast.
pub struct SbdrOracle<'a, P: Probe, R: Rng> {
    probe: &'a mut P,
    pool: &'a MemoryPool,
    rng: &'a mut R,
    threshold: f64,
    pairs: u32,
    reps: u32,
    count: u64,
}

impl<'a, P: Probe, R: Rng> SbdrOracle<'a, P, R> {
    pub fn new(probe: &'a mut P, pool: &'a MemoryPool, rng: &'a mut R, threshold: f64, pairs: u32, reps: u32) -> Self {
        Self { probe, pool, rng, threshold, pairs, reps, count: 0 }
    }

    pub fn is_slow(&mut self, bits: &[u8]) -> Result<bool> {
        self.count += 1;
        let sample = measure_t_sbdr(self.probe, self.pool, self.rng, mask_of(bits), self.pairs, self.reps)?;
        Ok(sample.mean_latency > self.threshold)
    }

    pub fn probes(&self) -> u64 {
        self.count
    }

    pub fn addr_width(&self) -> u8 {
        self.pool.addr_width
    }
}

/// Single-bit pass. Returns `(pure_row, remaining)`.
pub fn exclude_pure_row_bits<P: Probe, R: Rng>(oracle: &mut SbdrOracle<P, R>) -> Result<(BTreeSet<u8>, BTreeSet<u8>)> {
    let mut pure = BTreeSet::new();
    let mut remaining = BTreeSet::new();
    for b in 0..oracle.addr_width() {
        if oracle.is_slow(&[b])? {
            pure.insert(b);
        } else {
            remaining.insert(b);
        }
    }
    Ok((pure, remaining))
}

/// Pair pass over the remaining bits. Returns the slow pairs and the row bits
/// they imply together with the pure row bits.
pub fn duet<P: Probe, R: Rng>(
    oracle: &mut SbdrOracle<P, R>,
    remaining: &BTreeSet<u8>,
    pure_row: &BTreeSet<u8>,
) -> Result<(BTreeSet<BitPair>, BTreeSet<u8>)> {
    let bits: Vec<u8> = remaining.iter().copied().collect();
    let mut pairs = BTreeSet::new();
    for (i, &x) in bits.iter().enumerate() {
        for &y in &bits[i + 1..] {
            if oracle.is_slow(&[x, y])? {
                pairs.insert((x, y));
            }
        }
    }
    let rows = collect_higher(&pairs, pure_row);
    Ok((pairs, rows))
}

/// Row bits implied by slow pairs: the higher bit of every pair, plus any
/// pair bit that falls inside the span of bits collected so far.
pub fn collect_higher(pairs: &BTreeSet<BitPair>, pure_row: &BTreeSet<u8>) -> BTreeSet<u8> {
    let mut rows: BTreeSet<u8> = pure_row.iter().copied().chain(pairs.iter().map(|&(_, hi)| hi)).collect();
    let (Some(&lo), Some(&hi)) = (rows.first(), rows.last()) else {
        return rows;
    };
    for &(a, b) in pairs {
        for bit in [a, b] {
            if (lo..=hi).contains(&bit) {
                rows.insert(bit);
            }
        }
    }
    rows
}

/// Differing bits that put an access pair into the same bank and different rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbdrBase(pub Vec<u8>);

impl SbdrBase {
    fn with(&self, extra: &[u8]) -> Vec<u8> {
        let mut v = self.0.clone();
        v.extend_from_slice(extra);
        v
    }
}

/// Triple pass: `b` is a bank bit iff adding it to the base makes the access fast.
pub fn trios<P: Probe, R: Rng>(
    oracle: &mut SbdrOracle<P, R>,
    base: &SbdrBase,
    candidates: &BTreeSet<u8>,
) -> Result<BTreeSet<u8>> {
    let mut bank = BTreeSet::new();
    for &b in candidates.iter().filter(|b| !base.0.contains(b)) {
        if !oracle.is_slow(&base.with(&[b]))? {
            bank.insert(b);
        }
    }
    Ok(bank)
}

/// Quadruple pass: two bank bits share a function iff the access stays slow.
pub fn quartet<P: Probe, R: Rng>(
    oracle: &mut SbdrOracle<P, R>,
    base: &SbdrBase,
    non_row_bits: &BTreeSet<u8>,
) -> Result<BTreeSet<BitPair>> {
    let bits: Vec<u8> = non_row_bits.iter().copied().filter(|b| !base.0.contains(b)).collect();
    let mut pairs = BTreeSet::new();
    for (i, &x) in bits.iter().enumerate() {
        for &y in &bits[i + 1..] {
            if oracle.is_slow(&base.with(&[x, y]))? {
                pairs.insert((x, y));
            }
        }
    }
    Ok(pairs)
}

/// Connected components of the pair graph, each sorted ascending; components
/// are ordered by their lowest bit.
pub fn merge(pairs: &BTreeSet<BitPair>) -> Vec<Vec<u8>> {
    let mut parent: BTreeMap<u8, u8> = BTreeMap::new();
    fn find(parent: &mut BTreeMap<u8, u8>, x: u8) -> u8 {
        let p = *parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let root = find(parent, p);
        parent.insert(x, root);
        root
    }
    for &(a, b) in pairs {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
        }
    }
    let mut groups: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
    let keys: Vec<u8> = parent.keys().copied().collect();
    for x in keys {
        let r = find(&mut parent, x);
        groups.entry(r).or_default().push(x);
    }
    let mut out: Vec<Vec<u8>> = groups.into_values().collect();
    for g in &mut out {
        g.sort_unstable();
    }
    out.sort();
    out
}

struct Timer {
    start: Instant,
    probes: u64,
}

impl Timer {
    fn start<P: Probe, R: Rng>(oracle: &SbdrOracle<P, R>) -> Self {
        Self { start: Instant::now(), probes: oracle.probes() }
    }

    fn finish<P: Probe, R: Rng>(self, oracle: &SbdrOracle<P, R>, step: &str, note: String) -> StepLog {
        debug!("{step}: {note}");
        StepLog {
            step: step.to_string(),
            probes: oracle.probes() - self.probes,
            elapsed_us: self.start.elapsed().as_micros() as u64,
            note,
        }
    }
}

/// Bank functions found from one borrowed base, before singleton handling.
struct BankPass {
    bank_bits: BTreeSet<u8>,
    quartet_pairs: BTreeSet<BitPair>,
}

fn bank_pass<P: Probe, R: Rng>(
    oracle: &mut SbdrOracle<P, R>,
    base: &SbdrBase,
    candidates: &BTreeSet<u8>,
    max_diff_bits: u8,
    steps: &mut Vec<StepLog>,
    label: &str,
) -> Result<BankPass> {
    let t = Timer::start(oracle);
    let bank_bits = if max_diff_bits >= 3 { trios(oracle, base, candidates)? } else { BTreeSet::new() };
    steps.push(t.finish(oracle, &format!("trios{label}"), format!("base {:?}, bank bits {:?}", base.0, bank_bits)));
    let t = Timer::start(oracle);
    let quartet_pairs = if max_diff_bits >= 4 { quartet(oracle, base, &bank_bits)? } else { BTreeSet::new() };
    steps.push(t.finish(oracle, &format!("quartet{label}"), format!("pairs {quartet_pairs:?}")));
    Ok(BankPass { bank_bits, quartet_pairs })
}

/// Functions from duet pairs, quartet pairs and leftover bank bits. Bank
/// bits that pair with nothing become single-bit functions.
fn assemble(duet_pairs: &BTreeSet<BitPair>, pass: &BankPass) -> (Vec<Vec<u8>>, BTreeSet<u8>) {
    let mut all: BTreeSet<BitPair> = duet_pairs.clone();
    all.extend(pass.quartet_pairs.iter().copied());
    let mut functions = merge(&all);
    let covered: BTreeSet<u8> = functions.iter().flatten().copied().collect();
    let singles: BTreeSet<u8> = pass.bank_bits.iter().copied().filter(|b| !covered.contains(b)).collect();
    functions.extend(singles.iter().map(|&b| vec![b]));
    functions.sort();
    (functions, singles)
}

/// Picks a second base from a different function than the first when possible.
fn second_base(first: &SbdrBase, duet_pairs: &BTreeSet<BitPair>, pure_row: &BTreeSet<u8>) -> Option<SbdrBase> {
    let components = merge(duet_pairs);
    let first_comp = components.iter().position(|c| c.contains(&first.0[0]));
    let other_comp = duet_pairs.iter().find(|(a, _)| components.iter().position(|c| c.contains(a)) != first_comp);
    if let Some(&(a, b)) = other_comp {
        return Some(SbdrBase(vec![a, b]));
    }
    if let Some(&(a, b)) = duet_pairs.iter().find(|&&(a, b)| vec![a, b] != first.0) {
        return Some(SbdrBase(vec![a, b]));
    }
    pure_row.iter().find(|&&r| vec![r] != first.0).map(|&r| SbdrBase(vec![r]))
}

/// Full recovery run: threshold, then the four passes, then merging.
pub fn recover<P: Probe, R: Rng>(
    probe: &mut P,
    pool: &MemoryPool,
    rng: &mut R,
    config: &RecoveryConfig,
) -> Result<RecoveryReport> {
    if !(2..=4).contains(&config.max_diff_bits) {
        return Err(Error::Config(format!("max_diff_bits must be in 2..=4, got {}", config.max_diff_bits)));
    }
    let start = Instant::now();
    let threshold = estimate_threshold(probe, pool, rng, config.threshold_samples, config.reps)?;
    let mut oracle = SbdrOracle::new(probe, pool, rng, threshold.threshold, config.pairs, config.reps);
    let mut steps = Vec::new();
    let mut warnings = Vec::new();
    let mut state = RecoveryState { threshold: threshold.threshold, ..Default::default() };

    let t = Timer::start(&oracle);
    let (pure, remaining) = exclude_pure_row_bits(&mut oracle)?;
    steps.push(t.finish(&oracle, "pure-row", format!("pure row bits {pure:?}")));
    state.pure_row_bits = pure;
    state.candidate_bits = remaining;

    let t = Timer::start(&oracle);
    let (duet_pairs, rows) = duet(&mut oracle, &state.candidate_bits, &state.pure_row_bits)?;
    steps.push(t.finish(&oracle, "duet", format!("pairs {duet_pairs:?}, row bits {rows:?}")));
    state.bank_func_pairs = duet_pairs.clone();
    state.row_bits = rows;

    let (Some(&row_lo), Some(&row_hi)) = (state.row_bits.first(), state.row_bits.last()) else {
        return Err(Error::Inconsistency("no row bits observed: neither pure row bits nor slow pairs".into()));
    };
    let paired: BTreeSet<u8> = duet_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    if let Some(gap) = (row_lo..=row_hi).find(|b| !state.pure_row_bits.contains(b) && !paired.contains(b)) {
        return Err(Error::Inconsistency(format!(
            "row bits {:?} are not contiguous: bit {gap} was never observed as a row bit",
            state.row_bits
        )));
    }
    let rows = BitRange::new(row_lo, row_hi)?;
    state.row_bits = (row_lo..=row_hi).collect();

    let base = match duet_pairs.iter().next() {
        Some(&(a, b)) => SbdrBase(vec![a, b]),
        None => {
            let r = *state.pure_row_bits.first().expect("row bits non-empty");
            warnings.push(format!("no slow pairs; borrowing pure row bit {r} as the base state"));
            SbdrBase(vec![r])
        }
    };
    let candidates: BTreeSet<u8> = state.candidate_bits.difference(&state.row_bits).copied().collect();
    let pass = bank_pass(&mut oracle, &base, &candidates, config.max_diff_bits, &mut steps, "")?;
    let (functions, singles) = assemble(&duet_pairs, &pass);
    for s in &singles {
        warnings.push(format!("bit {s} forms a single-bit bank function"));
    }
    state.non_row_bank_bits = pass.bank_bits.clone();

    if config.cross_validate && config.max_diff_bits >= 3 {
        match second_base(&base, &duet_pairs, &state.pure_row_bits) {
            Some(base2) => {
                let pass2 = bank_pass(&mut oracle, &base2, &candidates, config.max_diff_bits, &mut steps, "-check")?;
                let (functions2, _) = assemble(&duet_pairs, &pass2);
                if functions2 != functions {
                    return Err(Error::Inconsistency(format!(
                        "base {:?} gives {functions:?} but base {:?} gives {functions2:?}",
                        base.0, base2.0
                    )));
                }
            }
            None => warnings.push("no second base available; cross-validation skipped".into()),
        }
    }
    state.merged_functions = functions.clone();

    let funcs = functions.iter().map(|f| BankFunction::new(f)).collect::<Result<Vec<_>>>()?;
    let recovered = AddressMapping::new(funcs, rows, pool.addr_width)
        .map_err(|e| Error::Inconsistency(format!("recovered functions are not a valid mapping: {e}")))?;
    for w in &warnings {
        warn!("{w}");
    }
    let probe_count = oracle.probes();
    Ok(RecoveryReport {
        recovered,
        probe_count,
        threshold,
        state,
        steps,
        warnings,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Recovery against a simulated DIMM with mapping `truth`. The pool, the
/// probe noise and pair sampling each draw from their own stream of `seed`.
pub fn recover_simulated(truth: &AddressMapping, model: LatencyModel, seed: u64, config: &RecoveryConfig) -> Result<RecoveryReport> {
    let (mut probe, pool) = simulated_bench(truth, model, seed)?;
    recover(&mut probe, &pool, &mut stream(seed, "pairs"), config)
}

/// Pair-latency grid over `bits` on a simulated DIMM.
pub fn simulated_latency_grid(truth: &AddressMapping, model: LatencyModel, seed: u64, bits: &[u8], config: &RecoveryConfig) -> Result<LatencyGrid> {
    if let Some(&b) = bits.iter().find(|&&b| b >= truth.addr_width()) {
        return Err(Error::AddressRange { addr: 1u64 << b.min(63), width: truth.addr_width() });
    }
    let (mut probe, pool) = simulated_bench(truth, model, seed)?;
    pair_latency_grid(&mut probe, &pool, &mut stream(seed, "grid"), bits, config.pairs, config.reps)
}

fn simulated_bench(truth: &AddressMapping, model: LatencyModel, seed: u64) -> Result<(SimulatedProbe, MemoryPool)> {
    let pool = MemoryPool::new(truth.addr_width(), DEFAULT_POOL_COVERAGE, derive(seed, "pool"))?;
    let probe = SimulatedProbe::new(truth.clone(), model, stream(seed, "probe"))?;
    Ok((probe, pool))
}

/// Number of XOR candidates over `n` bits with between 1 and `max_arity` members.
pub fn candidate_count(n: u32, max_arity: u32) -> u128 {
    (1..=max_arity.min(n)).map(|k| binomial(n, k)).sum()
}

/// Ratio of brute-force candidate budgets between two (bits, arity) settings.
pub fn search_space_ratio(large: (u32, u32), small: (u32, u32)) -> f64 {
    candidate_count(large.0, large.1) as f64 / candidate_count(small.0, small.1) as f64
}

/// Ratio of address-space sizes, `2^large_bits / 2^small_bits`.
pub fn address_space_ratio(large_bits: u32, small_bits: u32) -> u128 {
    1u128 << (large_bits - small_bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub max_arity: u32,
    /// Largest number of candidate functions the search may test.
    pub candidate_budget: u128,
    /// Addresses sampled and sorted into bank classes.
    pub addresses: usize,
    /// Lowest bit a candidate function may use.
    pub min_bit: u8,
    pub pairs: u32,
    pub reps: u32,
    pub threshold_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            max_arity: 2,
            candidate_budget: 1 << 22,
            addresses: 512,
            min_bit: 6,
            pairs: 1,
            reps: 50,
            threshold_samples: 5000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub functions: Vec<Vec<u8>>,
    /// Pairwise timing measurements used to build bank classes.
    pub probe_count: u64,
    pub candidates_tested: u128,
    pub classes: usize,
    pub elapsed_ms: f64,
}

/// Exhaustive baseline: sort random addresses into bank classes by pairwise
/// timing, then keep every XOR candidate (up to `max_arity` bits) whose parity
/// is constant inside each class, and reduce the survivors to a
/// minimum-weight basis.
pub fn brute_force_baseline<P: Probe, R: Rng>(
    probe: &mut P,
    pool: &MemoryPool,
    rng: &mut R,
    config: &BaselineConfig,
) -> Result<BaselineReport> {
    let n_bits = u32::from(pool.addr_width.saturating_sub(config.min_bit));
    let needed = candidate_count(n_bits, config.max_arity);
    if needed > config.candidate_budget {
        return Err(Error::Budget { needed, budget: config.candidate_budget });
    }
    let start = Instant::now();
    let threshold = estimate_threshold(probe, pool, rng, config.threshold_samples, config.reps)?.threshold;

    let mut addrs = BTreeSet::new();
    while addrs.len() < config.addresses {
        addrs.insert(pool.sample(rng)?);
    }
    let mut unassigned: Vec<u64> = addrs.into_iter().collect();
    let mut classes: Vec<Vec<u64>> = Vec::new();
    let mut probes = 0u64;
    while let Some(pivot) = unassigned.pop() {
        let mut class = vec![pivot];
        let mut rest = Vec::with_capacity(unassigned.len());
        for &a in &unassigned {
            probes += 1;
            let lat = (0..config.pairs.max(1)).map(|_| probe.access_pair(pivot, a, config.reps)).sum::<f64>()
                / f64::from(config.pairs.max(1));
            if lat > threshold {
                class.push(a);
            } else {
                rest.push(a);
            }
        }
        unassigned = rest;
        classes.push(class);
    }
    let informative: Vec<&Vec<u64>> = classes.iter().filter(|c| c.len() >= 2).collect();

    let bits: Vec<u8> = (config.min_bit..pool.addr_width).collect();
    let mut survivors = Vec::new();
    let mut tested = 0u128;
    for k in 1..=config.max_arity.min(n_bits) as usize {
        for_each_combination(bits.len(), k, &mut |idx| {
            tested += 1;
            let mask = idx.iter().fold(0u64, |m, &i| m | 1 << bits[i]);
            let constant = informative.iter().all(|c| {
                let p0 = (c[0] & mask).count_ones() & 1;
                c[1..].iter().all(|a| (a & mask).count_ones() & 1 == p0)
            });
            if constant {
                survivors.push(mask);
            }
        });
    }
    survivors.sort_by_key(|m| (m.count_ones(), *m));
    let mut basis = Gf2Basis::new();
    let mut functions: Vec<Vec<u8>> = survivors.into_iter().filter(|&m| basis.insert(m)).map(bits_of).collect();
    functions.sort();
    Ok(BaselineReport {
        functions,
        probe_count: probes,
        candidates_tested: tested,
        classes: classes.len(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Calls `f` with every ascending k-subset of `0..n`.
fn for_each_combination(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == 0 || k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
