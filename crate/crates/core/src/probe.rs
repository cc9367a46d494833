//! Row-buffer-conflict timing side channel.
//!
//! A [`Probe`] measures the mean per-access latency of an ordered address
//! pair. The only backend shipped here is [`SimulatedProbe`], which
//! classifies the pair through a ground-truth [`AddressMapping`] and adds
//! Gaussian noise. [`measure_t_sbdr`] averages such measurements over random
//! pool pairs that differ exactly in a chosen bit set.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bits::{bits_of, range_mask};
use crate::dram::AddressMapping;
use crate::error::{Error, Result};
use crate::seed::{mix64, unit_from_hash, SimRng};

/// Latency of one access pair, in nanoseconds.
pub trait Probe {
    /// Mean per-access latency of alternately accessing `a` and `b`, `reps` times.
    fn access_pair(&mut self, a: u64, b: u64, reps: u32) -> f64;
}

/// Mean latencies of the three pair classes plus per-access noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    /// Same bank, same row (row-buffer hit).
    pub sr_mean: f64,
    /// Different bank.
    pub db_mean: f64,
    /// Same bank, different row (row-buffer conflict).
    pub sbdr_mean: f64,
    pub noise_std: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { sr_mean: 200.0, db_mean: 210.0, sbdr_mean: 330.0, noise_std: 8.0 }
    }
}

impl LatencyModel {
    pub fn with_noise(noise_std: f64) -> Self {
        Self { noise_std, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sbdr_mean > self.db_mean && self.db_mean >= self.sr_mean && self.sr_mean > 0.0) {
            return Err(Error::Config(format!("latency means must satisfy sbdr > db >= sr > 0: {self:?}")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Separation between the conflict cluster and the nearest other cluster,
    /// in units of per-access noise.
    pub fn separation_sigmas(&self) -> f64 {
        (self.sbdr_mean - self.sr_mean.max(self.db_mean)) / self.noise_std
    }
}

/// Simulated backend over a ground-truth mapping. Owns its RNG stream.
#[derive(Debug, Clone)]
pub struct SimulatedProbe {
    truth: AddressMapping,
    model: LatencyModel,
    noise: Option<Normal<f64>>,
    rng: SimRng,
    accesses: u64,
}

impl SimulatedProbe {
    pub fn new(truth: AddressMapping, model: LatencyModel, rng: SimRng) -> Result<Self> {
        model.validate()?;
        let noise = (model.noise_std > 0.0).then(|| Normal::new(0.0, model.noise_std).expect("validated std"));
        Ok(Self { truth, model, noise, rng, accesses: 0 })
    }

    pub fn truth(&self) -> &AddressMapping {
        &self.truth
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    /// Total individual accesses simulated so far.
    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    fn class_mean(&self, a: u64, b: u64) -> f64 {
        let t = &self.truth;
        if t.bank_of(a) != t.bank_of(b) {
            self.model.db_mean
        } else if t.row_of(a) != t.row_of(b) {
            self.model.sbdr_mean
        } else {
            self.model.sr_mean
        }
    }
}

impl Probe for SimulatedProbe {
    fn access_pair(&mut self, a: u64, b: u64, reps: u32) -> f64 {
        let reps = reps.max(1);
        self.accesses += 2 * reps as u64;
        let mean = self.class_mean(a, b);
        match &self.noise {
            None => mean,
            // the mean of n iid N(0, s) draws is exactly N(0, s / sqrt(n))
            Some(noise) => mean + noise.sample(&mut self.rng) / f64::from(2 * reps).sqrt(),
        }
    }
}

/// Addresses available for pairing. Membership is page-granular and decided
/// by a keyed hash, so the pool is a uniform random subset of the space
/// without materialising millions of page frames. Optional fixed-bit
/// constraints model pools that miss part of the address space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPool {
    pub addr_width: u8,
    pub page_shift: u8,
    /// Fraction of pages in the pool.
    pub coverage: f64,
    pub key: u64,
    /// Bits whose value is fixed for every pool address.
    pub fixed_mask: u64,
    pub fixed_value: u64,
}

pub const DEFAULT_POOL_COVERAGE: f64 = 0.70;

impl MemoryPool {
    pub fn new(addr_width: u8, coverage: f64, key: u64) -> Result<Self> {
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(Error::Config(format!("pool coverage must be in (0, 1], got {coverage}")));
        }
        if !(13..=63).contains(&addr_width) {
            return Err(Error::Config(format!("unsupported address width {addr_width}")));
        }
        Ok(Self { addr_width, page_shift: 12, coverage, key, fixed_mask: 0, fixed_value: 0 })
    }

    /// Restricts the pool to addresses where `bit` equals `value`.
    pub fn with_fixed_bit(mut self, bit: u8, value: bool) -> Self {
        self.fixed_mask |= 1 << bit;
        if value {
            self.fixed_value |= 1 << bit;
        } else {
            self.fixed_value &= !(1 << bit);
        }
        self
    }

    pub fn contains(&self, addr: u64) -> bool {
        if addr >> self.addr_width != 0 || addr & self.fixed_mask != self.fixed_value {
            return false;
        }
        let page = addr >> self.page_shift;
        unit_from_hash(mix64(page ^ self.key)) < self.coverage
    }

    /// Fraction of the full address space the pool covers.
    pub fn coverage_fraction(&self) -> f64 {
        self.coverage / (1u64 << self.fixed_mask.count_ones()) as f64
    }

    /// Uniform random pool address (rejection sampling).
    pub fn sample(&self, rng: &mut impl Rng) -> Result<u64> {
        let space = range_mask(0, self.addr_width - 1);
        for _ in 0..10_000 {
            let a = (rng.gen::<u64>() & space & !self.fixed_mask) | self.fixed_value;
            if self.contains(a) {
                return Ok(a);
            }
        }
        Err(Error::Config("memory pool appears empty".into()))
    }
}

/// One averaged pairwise latency measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub diff_bits: Vec<u8>,
    pub mean_latency: f64,
    pub pair_count: u32,
    pub reps_per_pair: u32,
}

pub const DEFAULT_PAIRS: u32 = 16;
pub const DEFAULT_REPS: u32 = 50;
/// Draws per requested pair before a probe gives up on the pool.
const DRAWS_PER_PAIR: usize = 64;

/// Average latency over `pairs` random pool pairs differing exactly in `diff_mask`.
pub fn measure_t_sbdr(
    probe: &mut impl Probe,
    pool: &MemoryPool,
    rng: &mut impl Rng,
    diff_mask: u64,
    pairs: u32,
    reps: u32,
) -> Result<TimingSample> {
    if diff_mask == 0 {
        return Err(Error::Contract("differing-bit set must be non-empty".into()));
    }
    let pairs = pairs.max(1);
    let budget = pairs as usize * DRAWS_PER_PAIR;
    let mut found = 0u32;
    let mut total = 0.0;
    let mut draws = 0usize;
    while found < pairs {
        if draws >= budget {
            return Err(Error::PoolCoverage { bits: bits_of(diff_mask), draws });
        }
        draws += 1;
        let Ok(base) = pool.sample(rng) else {
            return Err(Error::PoolCoverage { bits: bits_of(diff_mask), draws });
        };
        let partner = base ^ diff_mask;
        if !pool.contains(partner) {
            continue;
        }
        total += probe.access_pair(base, partner, reps);
        found += 1;
    }
    Ok(TimingSample {
        diff_bits: bits_of(diff_mask),
        mean_latency: total / pairs as f64,
        pair_count: pairs,
        reps_per_pair: reps,
    })
}

/// Mean latency for every pair of `bits` (the diagonal holds single bits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyGrid {
    pub bits: Vec<u8>,
    /// Row-major, `bits.len()` squared, symmetric.
    pub latency: Vec<Vec<f64>>,
}

pub fn pair_latency_grid(
    probe: &mut impl Probe,
    pool: &MemoryPool,
    rng: &mut impl Rng,
    bits: &[u8],
    pairs: u32,
    reps: u32,
) -> Result<LatencyGrid> {
    let n = bits.len();
    let mut latency = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let mask = (1u64 << bits[i]) | (1u64 << bits[j]);
            let t = measure_t_sbdr(probe, pool, rng, mask, pairs, reps)?.mean_latency;
            latency[i][j] = t;
            latency[j][i] = t;
        }
    }
    Ok(LatencyGrid { bits: bits.to_vec(), latency })
}

/// Latency histogram with fixed-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    pub start: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl LatencyHistogram {
    pub fn build(values: &[f64], bin_width: f64) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Self { start: 0.0, bin_width, counts: Vec::new() };
        }
        let start = (lo / bin_width).floor() * bin_width;
        let n = ((hi - start) / bin_width).floor() as usize + 1;
        let mut counts = vec![0u64; n];
        for &v in values {
            let i = (((v - start) / bin_width).floor() as usize).min(n - 1);
            counts[i] += 1;
        }
        Self { start, bin_width, counts }
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.start + (i as f64 + 0.5) * self.bin_width
    }
}

/// Result of the threshold search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub threshold: f64,
    /// Width of the empty latency gap the threshold sits in.
    pub gap: f64,
    /// Fraction of sampled pairs above the threshold.
    pub above_fraction: f64,
    /// Bank count implied by the above-threshold fraction (nearest power of two).
    pub implied_banks: u64,
    /// Robust spread estimate of the fast cluster.
    pub noise_estimate: f64,
    pub samples: usize,
    pub histogram: LatencyHistogram,
}

pub const MIN_THRESHOLD_SAMPLES: usize = 1000;

/// Estimates the conflict threshold from `samples` random pool pairs.
///
/// The cut point is the centre of the widest empty stretch of the sorted
/// latency distribution that leaves at least a minimum share of samples on
/// each side. The fraction of pairs above it must be close to `2^-k` for some
/// `k >= 1`, since random pairs fall into the same bank with probability
/// `1 / #banks`.
pub fn estimate_threshold(
    probe: &mut impl Probe,
    pool: &MemoryPool,
    rng: &mut impl Rng,
    samples: usize,
    reps: u32,
) -> Result<ThresholdEstimate> {
    if samples < MIN_THRESHOLD_SAMPLES {
        return Err(Error::ThresholdEstimation(format!("need at least {MIN_THRESHOLD_SAMPLES} pairs, got {samples}")));
    }
    let mut lat = Vec::with_capacity(samples);
    while lat.len() < samples {
        let a = pool.sample(rng)?;
        let b = pool.sample(rng)?;
        if a == b {
            continue;
        }
        lat.push(probe.access_pair(a, b, reps));
    }
    threshold_from_latencies(&lat)
}

/// Threshold search over already-measured pair latencies.
pub fn threshold_from_latencies(lat: &[f64]) -> Result<ThresholdEstimate> {
    let mut sorted = lat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let min_side = (n / 1000).max(5);
    if n < 2 * min_side {
        return Err(Error::ThresholdEstimation("too few samples".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for i in (min_side - 1)..(n - min_side) {
        let gap = sorted[i + 1] - sorted[i];
        if best.map_or(true, |(g, _)| gap > g) {
            best = Some((gap, i));
        }
    }
    let (gap, idx) = best.expect("range non-empty");
    if gap <= 0.0 {
        return Err(Error::ThresholdEstimation("latencies show no separation".into()));
    }
    let threshold = 0.5 * (sorted[idx] + sorted[idx + 1]);
    let below = &sorted[..=idx];
    let noise_estimate = robust_spread(below);
    if gap < 2.0 * noise_estimate {
        return Err(Error::ThresholdEstimation(format!(
            "gap {gap:.2} ns is below twice the cluster spread {noise_estimate:.2} ns"
        )));
    }
    let above = n - idx - 1;
    let above_fraction = above as f64 / n as f64;
    let k = (-above_fraction.log2()).round().max(1.0);
    let ideal = (-k).exp2();
    if (above_fraction - ideal).abs() > 0.5 * ideal {
        return Err(Error::ThresholdEstimation(format!(
            "above-threshold fraction {above_fraction:.4} is not near any 2^-k"
        )));
    }
    let bin = (gap / 20.0).clamp(0.25, 2.0);
    Ok(ThresholdEstimate {
        threshold,
        gap,
        above_fraction,
        implied_banks: 1u64 << k as u32,
        noise_estimate,
        samples: n,
        histogram: LatencyHistogram::build(lat, bin),
    })
}

/// 1.4826 × median absolute deviation.
fn robust_spread(sorted: &[f64]) -> f64 {
    if sorted.len() < 2 {
        return 0.0;
    }
    let median = sorted[sorted.len() / 2];
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    1.4826 * dev[dev.len() / 2]
}
