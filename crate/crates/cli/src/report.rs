//! Versioned report files, run manifests and plot-ready CSV series.

use std::io::Write;

use hammerlab::dram::{preset, preset_geometry, AddressMapping, DramGeometry, MappingDoc, PRESET_IDS};
use hammerlab::fuzz::{BankMode, CampaignReport, CompareReport, HammerPattern, NopTuneReport};
use hammerlab::hammer::TrrConfig;
use hammerlab::probe::LatencyGrid;
use hammerlab::remap::RecoveryReport;
use hammerlab::uarch::{PipelineConfig, PROFILE_IDS};
use hammerlab::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{RunConfig, MANIFEST_SCHEMA};

pub const REPORT_SCHEMA: &str = "hammerlab-report";
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fields holding wall-clock measurements; everything else in a report is
/// a function of the run config.
pub const WALL_CLOCK_FIELDS: [&str; 3] = ["elapsed_ms", "elapsed_us", "wall_clock"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryOutput {
    pub preset: String,
    pub seed: u64,
    /// Recovered functions and row range equal the preset's.
    pub exact: bool,
    pub truth: MappingDoc,
    pub report: RecoveryReport,
    pub heatmap: Option<LatencyGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetMapping {
    pub id: String,
    pub geometry: DramGeometry,
    pub mapping: MappingDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetsOutput {
    pub mappings: Vec<PresetMapping>,
    pub pipelines: Vec<PipelineConfig>,
    pub trr: Vec<(String, TrrConfig)>,
}

impl PresetsOutput {
    pub fn build() -> Result<Self> {
        let mappings = PRESET_IDS
            .iter()
            .map(|id| Ok(PresetMapping { id: id.to_string(), geometry: preset_geometry(id)?, mapping: preset(id)?.to_doc() }))
            .collect::<Result<_>>()?;
        let pipelines = PROFILE_IDS.iter().map(|p| PipelineConfig::profile(p)).collect::<Result<_>>()?;
        let trr = ["disabled", "defeatable", "perfect"]
            .iter()
            .map(|n| Ok((n.to_string(), TrrConfig::named(n)?)))
            .collect::<Result<_>>()?;
        Ok(Self { mappings, pipelines, trr })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NopTuneOutput {
    pub pattern: HammerPattern,
    pub tune: NopTuneReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOutput {
    pub pattern: HammerPattern,
    pub sweep: CampaignReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "kebab-case")]
pub enum ReportBody {
    Recovery(RecoveryOutput),
    Fuzz(CampaignReport),
    Sweep(SweepOutput),
    NopTune(NopTuneOutput),
    Compare(CompareReport),
    Presets(PresetsOutput),
}

impl ReportBody {
    pub fn kind(&self) -> &'static str {
        match self {
            ReportBody::Recovery(_) => "recovery",
            ReportBody::Fuzz(_) => "fuzz",
            ReportBody::Sweep(_) => "sweep",
            ReportBody::NopTune(_) => "nop-tune",
            ReportBody::Compare(_) => "compare",
            ReportBody::Presets(_) => "presets",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: u32,
    pub tool_version: String,
    #[serde(flatten)]
    pub body: ReportBody,
}

impl Report {
    pub fn new(body: ReportBody) -> Self {
        Self { schema: REPORT_SCHEMA.into(), version: SCHEMA_VERSION, tool_version: TOOL_VERSION.into(), body }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks a report file against the current schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        check_header(&value, REPORT_SCHEMA)?;
        let known = ["schema", "version", "tool_version", "kind", "body"];
        if let Some(extra) = value.as_object().and_then(|o| o.keys().find(|k| !known.contains(&k.as_str()))) {
            return Err(Error::Contract(format!("unexpected report field `{extra}`")));
        }
        serde_json::from_value(value).map_err(|e| Error::Contract(format!("report does not match its schema: {e}")))
    }
}

fn check_header(value: &Value, schema: &str) -> Result<()> {
    let got = value.get("schema").and_then(Value::as_str);
    if got != Some(schema) {
        return Err(Error::Contract(format!("expected schema `{schema}`, found {got:?}")));
    }
    match value.get("version").and_then(Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => Ok(()),
        v => Err(Error::Contract(format!("unsupported {schema} version {v:?}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
}

/// Everything needed to rerun a campaign: the resolved config, the tool
/// version and the files the run wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub wall_clock: WallClock,
}

impl Manifest {
    pub fn new(config: RunConfig, outputs: Vec<String>, wall_clock: WallClock) -> Self {
        Self { schema: MANIFEST_SCHEMA.into(), version: SCHEMA_VERSION, tool_version: TOOL_VERSION.into(), config, outputs, wall_clock }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        check_header(&value, MANIFEST_SCHEMA)?;
        serde_json::from_value(value).map_err(|e| Error::Contract(format!("manifest does not match its schema: {e}")))
    }
}

/// Drops wall-clock fields at any depth so two runs can be compared.
pub fn strip_wall_clock(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for f in WALL_CLOCK_FIELDS {
                map.remove(f);
            }
            map.values_mut().for_each(strip_wall_clock);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    /// Latency of every bit pair, one row per pair.
    DuetHeatmap,
    /// Cumulative flips against virtual time.
    SweepCumulative,
    NopCurve,
    /// One row per strategy and barrier: total and best-pattern flips.
    CompareMatrix,
    /// Flips of each effective fuzzed pattern.
    FuzzEffective,
}

impl SeriesKind {
    pub fn name(self) -> &'static str {
        match self {
            SeriesKind::DuetHeatmap => "duet-heatmap",
            SeriesKind::SweepCumulative => "sweep-cumulative",
            SeriesKind::NopCurve => "nop-curve",
            SeriesKind::CompareMatrix => "compare-matrix",
            SeriesKind::FuzzEffective => "fuzz-effective",
        }
    }

    /// Series a report kind can produce.
    pub fn for_report(body: &ReportBody) -> Vec<SeriesKind> {
        match body {
            ReportBody::Recovery(r) if r.heatmap.is_some() => vec![SeriesKind::DuetHeatmap],
            ReportBody::Recovery(_) | ReportBody::Presets(_) => vec![],
            ReportBody::Fuzz(_) => vec![SeriesKind::FuzzEffective],
            ReportBody::Sweep(_) => vec![SeriesKind::SweepCumulative],
            ReportBody::NopTune(_) => vec![SeriesKind::NopCurve],
            ReportBody::Compare(_) => vec![SeriesKind::CompareMatrix],
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Writes `kind` of `report` as CSV with a header row.
pub fn emit_series<W: Write>(report: &ReportBody, kind: SeriesKind, out: W) -> Result<()> {
    let mismatch = || Error::KindMismatch { expected: kind.name().into(), actual: report.kind().into() };
    let mut w = csv::Writer::from_writer(out);
    match (kind, report) {
        (SeriesKind::DuetHeatmap, ReportBody::Recovery(r)) => {
            let grid = r.heatmap.as_ref().ok_or_else(mismatch)?;
            w.write_record(["bit_a", "bit_b", "latency"]).map_err(csv_err)?;
            for (i, a) in grid.bits.iter().enumerate() {
                for (j, b) in grid.bits.iter().enumerate() {
                    w.write_record([a.to_string(), b.to_string(), format!("{:.3}", grid.latency[i][j])]).map_err(csv_err)?;
                }
            }
        }
        (SeriesKind::SweepCumulative, ReportBody::Sweep(s)) => {
            w.write_record(["location", "virtual_time_ns", "cumulative_flips", "location_flips", "activation_rate"]).map_err(csv_err)?;
            for (i, (c, l)) in s.sweep.cumulative.iter().zip(&s.sweep.locations).enumerate() {
                w.write_record([i.to_string(), format!("{:.1}", c.time), c.flips.to_string(), l.flips.to_string(), format!("{:.3}", l.activation_rate)])
                    .map_err(csv_err)?;
            }
        }
        (SeriesKind::NopCurve, ReportBody::NopTune(t)) => {
            w.write_record(["nops", "flips", "activation_rate", "miss_rate"]).map_err(csv_err)?;
            for p in &t.tune.points {
                w.write_record([p.nops.to_string(), p.flips.to_string(), format!("{:.3}", p.activation_rate), format!("{:.4}", p.miss_rate)])
                    .map_err(csv_err)?;
            }
        }
        (SeriesKind::CompareMatrix, ReportBody::Compare(c)) => {
            w.write_record(["profile", "strategy", "barrier", "bank_count", "total_flips", "best_pattern_flips", "effective_patterns", "activation_rate"])
                .map_err(csv_err)?;
            for cell in &c.cells {
                let strategy = format!(
                    "{}-{}",
                    if cell.hammer == hammerlab::uarch::HammerKind::Load { "load" } else { "prefetch" },
                    if cell.banks == BankMode::Single { "S" } else { "M" }
                );
                w.write_record([
                    c.profile.clone(),
                    strategy,
                    cell.barrier.label(),
                    cell.bank_count.to_string(),
                    cell.total_flips.to_string(),
                    cell.best_pattern_flips.to_string(),
                    cell.effective_patterns.to_string(),
                    format!("{:.3}", cell.activation_rate),
                ])
                .map_err(csv_err)?;
            }
        }
        (SeriesKind::FuzzEffective, ReportBody::Fuzz(f)) => {
            w.write_record(["iteration", "flips"]).map_err(csv_err)?;
            for e in &f.effective_patterns {
                w.write_record([e.iteration.to_string(), e.flips.to_string()]).map_err(csv_err)?;
            }
        }
        _ => return Err(mismatch()),
    }
    w.flush()?;
    Ok(())
}

/// True when `recovered` has the same functions and row range as `truth`.
pub fn exact_recovery(recovered: &AddressMapping, truth: &AddressMapping) -> bool {
    recovered.same_functions(truth) && recovered.rows() == truth.rows()
}
