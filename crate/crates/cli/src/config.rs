//! Fully resolved run configuration. A manifest stores one of these, so
//! replaying a manifest reruns exactly the same campaign.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hammerlab::fuzz::{CompareConfig, HammerPattern, SimConfig};
use hammerlab::hammer::TrrConfig;
use hammerlab::probe::LatencyModel;
use hammerlab::remap::RecoveryConfig;
use hammerlab::uarch::{BarrierKind, BarrierPolicy, CodeStyle, HammerKind};
use hammerlab::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Remap,
    Fuzz,
    Sweep,
    NopTune,
    Compare,
    Presets,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Remap => "remap",
            Command::Fuzz => "fuzz",
            Command::Sweep => "sweep",
            Command::NopTune => "nop-tune",
            Command::Compare => "compare",
            Command::Presets => "presets",
        }
    }

    pub fn needs_seed(self) -> bool {
        self != Command::Presets
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    pub seed: Option<u64>,

    /// Mapping preset recovered by `remap`.
    pub preset: String,
    pub noise: f64,
    pub recovery: RecoveryConfig,
    /// Bits of the pair-latency grid written by `remap`; empty for none.
    pub heatmap_bits: Vec<u8>,

    pub profile: String,
    pub dimm: String,
    pub trr: String,
    pub hammer: HammerKind,
    pub style: CodeStyle,
    pub barrier: BarrierKind,
    pub obfuscate_branches: bool,
    /// Fuzz iterations.
    pub budget: u64,
    pub bank_count: u32,
    pub sweep_locations: usize,
    pub tune_locations: usize,
    pub nop_counts: Vec<u32>,
    /// NOP count used while fuzzing for a pattern when none is supplied.
    pub source_nops: u32,
    /// Fuzzed patterns re-swept when picking the best one.
    pub shortlist: usize,
    pub pattern: Option<HammerPattern>,
    pub compare: CompareConfig,
    /// Dotted paths into the simulation config, e.g. `dimm.thresholds.mean`.
    pub overrides: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Presets,
            seed: None,
            preset: "cometlake-8g".into(),
            noise: LatencyModel::default().noise_std,
            recovery: RecoveryConfig::default(),
            heatmap_bits: Vec::new(),
            profile: "comet".into(),
            dimm: "cometlake-8g".into(),
            trr: "defeatable".into(),
            hammer: HammerKind::Prefetch,
            style: CodeStyle::AsmImmediate,
            barrier: BarrierKind::None,
            obfuscate_branches: false,
            budget: 200,
            bank_count: 1,
            sweep_locations: 100,
            tune_locations: 16,
            nop_counts: (0..=1000).step_by(25).collect(),
            source_nops: 50,
            shortlist: 5,
            pattern: None,
            compare: CompareConfig::default(),
            overrides: BTreeMap::new(),
        }
    }
}

pub const MANIFEST_SCHEMA: &str = "hammerlab-manifest";

impl RunConfig {
    /// Reads a run config, or the config stored in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value = match value.get("schema").and_then(Value::as_str) {
            Some(MANIFEST_SCHEMA) => value.get("config").cloned().ok_or_else(|| Error::Config("manifest has no config".into()))?,
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config(format!("`{}` needs a seed", self.command.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.needs_seed() {
            self.seed()?;
        }
        if matches!(self.command, Command::Fuzz | Command::Compare) && self.budget == 0 && self.compare.budget == 0 {
            return Err(Error::Config("budget must be >= 1".into()));
        }
        if self.command == Command::NopTune && self.nop_counts.is_empty() {
            return Err(Error::Config("no NOP counts given".into()));
        }
        if self.bank_count == 0 {
            return Err(Error::Config("bank_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn latency_model(&self) -> Result<LatencyModel> {
        let m = LatencyModel::with_noise(self.noise);
        m.validate()?;
        Ok(m)
    }

    /// Simulation config with overrides applied.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut sim = SimConfig::new(&self.profile, &self.dimm, TrrConfig::named(&self.trr)?)?;
        sim.hammer = self.hammer;
        sim.style = self.style;
        sim.barrier = BarrierPolicy { kind: self.barrier, obfuscate_branches: self.obfuscate_branches };
        let sim = apply_overrides(sim, &self.overrides)?;
        sim.validate()?;
        Ok(sim)
    }
}

/// Replaces fields addressed by dotted paths. Paths must name existing
/// fields, and values must keep the field's type.
pub fn apply_overrides<T: Serialize + for<'de> Deserialize<'de>>(target: T, overrides: &BTreeMap<String, Value>) -> Result<T> {
    if overrides.is_empty() {
        return Ok(target);
    }
    let mut doc = serde_json::to_value(&target)?;
    for (path, value) in overrides {
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown override key `{path}`")))?;
        }
        *node = value.clone();
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("override does not fit the config: {e}")))
}

/// `none`, `nop<k>`, `lfence`, `mfence` or `cpuid`.
pub fn parse_barrier(s: &str) -> Result<BarrierKind> {
    match s {
        "none" => Ok(BarrierKind::None),
        "lfence" => Ok(BarrierKind::Lfence),
        "mfence" => Ok(BarrierKind::Mfence),
        "cpuid" => Ok(BarrierKind::Cpuid),
        _ => s
            .strip_prefix("nop")
            .and_then(|k| k.parse().ok())
            .map(BarrierKind::Nop)
            .ok_or_else(|| Error::Config(format!("unknown barrier `{s}`"))),
    }
}

/// `a..b:step` (inclusive of `b` when on the grid), `a..b`, or a comma list.
pub fn parse_counts(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::Config(format!("bad count list `{s}`"));
    if let Some((range, step)) = s.split_once("..").map(|(lo, rest)| {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
        ((lo, hi), step)
    }) {
        let lo: u32 = range.0.trim().parse().map_err(|_| bad())?;
        let hi: u32 = range.1.trim().parse().map_err(|_| bad())?;
        let step: usize = step.trim().parse().map_err(|_| bad())?;
        if step == 0 || hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).step_by(step).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

/// `key=value`, where the value is JSON or else taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_lists() {
        assert_eq!(parse_counts("0..100:25").unwrap(), vec![0, 25, 50, 75, 100]);
        assert_eq!(parse_counts("3..5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_counts("1, 8,64").unwrap(), vec![1, 8, 64]);
        assert_eq!(parse_counts("0..1000:25").unwrap().len(), 41);
        assert!(parse_counts("5..1").is_err());
        assert!(parse_counts("x").is_err());
    }

    #[test]
    fn barriers() {
        assert_eq!(parse_barrier("nop16").unwrap(), BarrierKind::Nop(16));
        assert_eq!(parse_barrier("cpuid").unwrap(), BarrierKind::Cpuid);
        assert!(parse_barrier("nopx").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields_and_reject_unknown_keys() {
        let mut cfg = RunConfig { command: Command::Fuzz, seed: Some(1), ..Default::default() };
        cfg.overrides.insert("dimm.thresholds.mean".into(), Value::from(900.0));
        cfg.overrides.insert("pipeline.rob_size".into(), Value::from(300));
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim.dimm.thresholds.mean, 900.0);
        assert_eq!(sim.pipeline.rob_size, 300);

        cfg.overrides.insert("dimm.thresholds.colour".into(), Value::from(1));
        assert_eq!(cfg.sim_config().unwrap_err().category(), "config");

        let mut cfg = RunConfig::default();
        cfg.overrides.insert("pipeline.rob_size".into(), Value::from("big"));
        assert_eq!(cfg.sim_config().unwrap_err().category(), "config");
    }

    #[test]
    fn campaigns_need_a_seed() {
        let cfg = RunConfig { command: Command::Fuzz, ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn schema_document_matches_the_config() {
        let schema: Value = serde_json::from_str(include_str!("../../../docs/run-config.schema.json")).unwrap();
        let defaults = serde_json::to_value(RunConfig::default()).unwrap();
        let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        let props = &schema["properties"];
        assert_eq!(keys(props), keys(&defaults));
        for nested in ["recovery", "compare"] {
            assert_eq!(keys(&props[nested]["properties"]), keys(&defaults[nested]), "{nested}");
        }
        for (name, field) in props.as_object().unwrap() {
            if let Some(d) = field.get("default") {
                assert_eq!(d, &defaults[name], "default of {name}");
            }
        }
        for (name, field) in props["recovery"]["properties"].as_object().unwrap() {
            assert_eq!(field["default"], defaults["recovery"][name], "default of recovery.{name}");
        }
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"command":"fuzz","sed":3}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let (k, v) = parse_override("trr=perfect").unwrap();
        assert_eq!((k.as_str(), v), ("trr", Value::String("perfect".into())));
    }
}
