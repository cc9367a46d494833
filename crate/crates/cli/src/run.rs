//! Executes a resolved [`RunConfig`] and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hammerlab::dram::{canonical_preset, preset};
use hammerlab::fuzz::{best_by_sweep, compare_strategies, fuzz_with_banks, nop_tune, sweep, HammerPattern, SimConfig};
use hammerlab::remap::{recover_simulated, simulated_latency_grid};
use hammerlab::uarch::BarrierKind;
use hammerlab::{Error, Result};
use log::info;

use crate::config::{Command, RunConfig};
use crate::report::{
    emit_series, exact_recovery, Manifest, NopTuneOutput, PresetsOutput, RecoveryOutput, Report, ReportBody, SeriesKind,
    SweepOutput, WallClock,
};

/// Runs the campaign and returns its report; no files are touched.
pub fn execute(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let body = match cfg.command {
        Command::Presets => ReportBody::Presets(PresetsOutput::build()?),
        Command::Remap => ReportBody::Recovery(remap(cfg)?),
        Command::Fuzz => {
            let sim = cfg.sim_config()?;
            ReportBody::Fuzz(fuzz_with_banks(cfg.budget, &sim, cfg.seed()?, cfg.bank_count)?)
        }
        Command::Sweep => {
            let sim = cfg.sim_config()?;
            let pattern = pattern_for(cfg, &sim)?;
            let sweep = sweep(&pattern, cfg.sweep_locations, &sim, cfg.seed()?)?;
            ReportBody::Sweep(SweepOutput { pattern, sweep })
        }
        Command::NopTune => {
            let mut sim = cfg.sim_config()?;
            let pattern = pattern_for(cfg, &sim)?;
            sim.locations = cfg.tune_locations;
            let tune = nop_tune(&pattern, &cfg.nop_counts, &sim, cfg.seed()?)?;
            ReportBody::NopTune(NopTuneOutput { pattern, tune })
        }
        Command::Compare => {
            let sim = cfg.sim_config()?;
            ReportBody::Compare(compare_strategies(&sim, &cfg.compare, cfg.seed()?)?)
        }
    };
    Ok(Report::new(body))
}

fn remap(cfg: &RunConfig) -> Result<RecoveryOutput> {
    let id = canonical_preset(&cfg.preset)
        .ok_or_else(|| Error::Lookup { kind: "mapping preset", name: cfg.preset.clone() })?;
    let truth = preset(id)?;
    let model = cfg.latency_model()?;
    let seed = cfg.seed()?;
    let report = recover_simulated(&truth, model, seed, &cfg.recovery)?;
    let heatmap = if cfg.heatmap_bits.is_empty() {
        None
    } else {
        Some(simulated_latency_grid(&truth, model, seed, &cfg.heatmap_bits, &cfg.recovery)?)
    };
    Ok(RecoveryOutput {
        preset: id.to_string(),
        seed,
        exact: exact_recovery(&report.recovered, &truth),
        truth: truth.to_doc(),
        report,
        heatmap,
    })
}

/// The configured pattern, or the best one a fuzz-and-sweep pass finds
/// with `source_nops` NOPs.
fn pattern_for(cfg: &RunConfig, sim: &SimConfig) -> Result<HammerPattern> {
    if let Some(p) = &cfg.pattern {
        p.validate()?;
        return Ok(p.with_banks(cfg.bank_count.max(p.bank_count)));
    }
    let mut source = sim.clone();
    source.barrier.kind = if cfg.source_nops == 0 { BarrierKind::None } else { BarrierKind::Nop(cfg.source_nops) };
    info!("no pattern given; fuzzing {} patterns for one", cfg.budget);
    let (pattern, _) = best_by_sweep(cfg.budget, &source, cfg.seed()?, cfg.shortlist, cfg.tune_locations)?
        .ok_or_else(|| Error::Contract(format!("no effective pattern in {} fuzz iterations", cfg.budget)))?;
    Ok(pattern.with_banks(cfg.bank_count))
}

/// Reads a pattern from a pattern file or from a report that carries one.
pub fn load_pattern(path: &Path) -> Result<HammerPattern> {
    let text = fs::read_to_string(path)?;
    if let Ok(p) = serde_json::from_str::<HammerPattern>(&text) {
        return Ok(p);
    }
    let report = Report::from_json(&text)?;
    match report.body {
        ReportBody::Fuzz(f) => f.best.map(|b| b.pattern).ok_or_else(|| Error::Contract("fuzz report has no effective pattern".into())),
        ReportBody::Sweep(s) => Ok(s.pattern),
        ReportBody::NopTune(t) => Ok(t.pattern),
        other => Err(Error::KindMismatch { expected: "fuzz, sweep or nop-tune".into(), actual: other.kind().into() }),
    }
}

/// Files written by [`run_to_dir`], relative to the output directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: Report,
    pub files: Vec<String>,
}

/// Executes `cfg` and writes `report.json`, its CSV series and `manifest.json`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<RunArtifacts> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let report = execute(cfg)?;
    fs::create_dir_all(dir)?;
    let mut files = vec!["report.json".to_string()];
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    for kind in SeriesKind::for_report(&report.body) {
        let name = format!("{}.csv", kind.name());
        emit_series(&report.body, kind, fs::File::create(dir.join(&name))?)?;
        files.push(name);
    }
    let wall_clock = WallClock { started_unix_ms: started, elapsed_ms: clock.elapsed().as_secs_f64() * 1e3 };
    let manifest = Manifest::new(cfg.clone(), files.clone(), wall_clock);
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    files.push("manifest.json".into());
    Ok(RunArtifacts { dir: dir.to_path_buf(), report, files })
}
