use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hammerlab::uarch::{CodeStyle, HammerKind};
use hammerlab_cli::config::{parse_barrier, parse_counts, parse_override};
use hammerlab_cli::run::{load_pattern, run_to_dir};
use hammerlab_cli::{Command, RunConfig};
use serde_json::json;

/// DRAM mapping recovery and prefetch-hammering simulation.
#[derive(Parser, Debug)]
#[command(name = "hammerlab", version, arg_required_else_help = true)]
struct Cli {
    /// Start from this run config or manifest; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: hammerlab-out/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fuzz iterations (results do not depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override a simulation field, e.g. `dimm.thresholds.mean=900`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Recover the bank functions and row bits of a simulated preset.
    Remap {
        #[arg(long)]
        preset: Option<String>,
        /// Per-access latency noise (standard deviation).
        #[arg(long)]
        noise: Option<f64>,
        /// Also measure the pair-latency grid over these bits, e.g. `6..20`.
        #[arg(long)]
        heatmap: Option<String>,
    },
    /// Search random non-uniform patterns for bit flips.
    Fuzz {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Replay one pattern at many locations.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Pattern file, or a fuzz/sweep/nop-tune report; default: fuzz for one.
        #[arg(long)]
        pattern: Option<PathBuf>,
        #[arg(long)]
        locations: Option<usize>,
    },
    /// Flip counts of one pattern across NOP counts.
    NopTune {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// NOP counts: `a..b:step` or a comma list.
        #[arg(long = "k")]
        nops: Option<String>,
        #[arg(long)]
        locations: Option<usize>,
    },
    /// Load/prefetch by single/multi-bank by barrier matrix.
    Compare {
        #[command(flatten)]
        sim: SimArgs,
        /// Barriers as a comma list, e.g. `none,nop16,lfence`.
        #[arg(long)]
        barriers: Option<String>,
        /// Bank counts tried for multi-bank cells.
        #[arg(long)]
        multi_banks: Option<String>,
    },
    /// List mapping presets, pipeline profiles and TRR presets.
    Presets,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Pipeline profile: comet, rocket, alder or raptor.
    #[arg(long)]
    profile: Option<String>,
    /// DIMM mapping preset.
    #[arg(long)]
    dimm: Option<String>,
    /// TRR preset: disabled, defeatable or perfect.
    #[arg(long)]
    trr: Option<String>,
    #[arg(long, value_parser = ["load", "prefetch"])]
    hammer: Option<String>,
    #[arg(long, value_parser = ["cpp-indirect", "asm-immediate"])]
    style: Option<String>,
    /// none, nop<k>, lfence, mfence or cpuid.
    #[arg(long)]
    barrier: Option<String>,
    #[arg(long)]
    obfuscate_branches: bool,
    /// Fuzz iterations.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    banks: Option<u32>,
}

impl SimArgs {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        set(&mut cfg.profile, &self.profile);
        set(&mut cfg.dimm, &self.dimm);
        set(&mut cfg.trr, &self.trr);
        if let Some(h) = &self.hammer {
            cfg.hammer = if h == "load" { HammerKind::Load } else { HammerKind::Prefetch };
        }
        if let Some(s) = &self.style {
            cfg.style = if s == "cpp-indirect" { CodeStyle::CppIndirect } else { CodeStyle::AsmImmediate };
        }
        if let Some(b) = &self.barrier {
            cfg.barrier = parse_barrier(b)?;
        }
        cfg.obfuscate_branches |= self.obfuscate_branches;
        if let Some(b) = self.budget {
            cfg.budget = b;
            cfg.compare.budget = b;
        }
        set(&mut cfg.bank_count, &self.banks);
        Ok(())
    }
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let command = match &cli.command {
        Sub::Remap { .. } => Command::Remap,
        Sub::Fuzz { .. } => Command::Fuzz,
        Sub::Sweep { .. } => Command::Sweep,
        Sub::NopTune { .. } => Command::NopTune,
        Sub::Compare { .. } => Command::Compare,
        Sub::Presets => Command::Presets,
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if cfg.command != command {
                return Err(hammerlab::Error::Config(format!(
                    "config is for `{}`, not `{}`",
                    cfg.command.name(),
                    command.name()
                ))
                .into());
            }
            cfg
        }
        None => RunConfig { command, ..Default::default() },
    };
    set(&mut cfg.seed, &cli.seed.map(Some));
    for o in &cli.overrides {
        let (k, v) = parse_override(o)?;
        cfg.overrides.insert(k, v);
    }
    match &cli.command {
        Sub::Remap { preset, noise, heatmap } => {
            set(&mut cfg.preset, preset);
            set(&mut cfg.noise, noise);
            if let Some(h) = heatmap {
                cfg.heatmap_bits = parse_counts(h)?.into_iter().map(|b| b.min(255) as u8).collect();
            }
        }
        Sub::Fuzz { sim } => sim.apply(&mut cfg)?,
        Sub::Sweep { sim, pattern, locations } => {
            sim.apply(&mut cfg)?;
            set(&mut cfg.sweep_locations, locations);
            if let Some(p) = pattern {
                cfg.pattern = Some(load_pattern(p).with_context(|| format!("reading pattern {}", p.display()))?);
            }
        }
        Sub::NopTune { sim, pattern, nops, locations } => {
            sim.apply(&mut cfg)?;
            set(&mut cfg.tune_locations, locations);
            if let Some(k) = nops {
                cfg.nop_counts = parse_counts(k)?;
            }
            if let Some(p) = pattern {
                cfg.pattern = Some(load_pattern(p).with_context(|| format!("reading pattern {}", p.display()))?);
            }
        }
        Sub::Compare { sim, barriers, multi_banks } => {
            sim.apply(&mut cfg)?;
            if let Some(b) = barriers {
                cfg.compare.barriers = b.split(',').map(|x| parse_barrier(x.trim())).collect::<Result<_, _>>()?;
            }
            if let Some(m) = multi_banks {
                cfg.compare.multi_bank_counts = parse_counts(m)?;
            }
        }
        Sub::Presets => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let cfg = resolve(&cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("hammerlab-out").join(cfg.command.name()));
    let artifacts = run_to_dir(&cfg, &dir)?;
    let summary = json!({
        "command": cfg.command.name(),
        "kind": artifacts.report.body.kind(),
        "dir": artifacts.dir,
        "files": artifacts.files,
    });
    println!("{summary}");
    Ok(())
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<hammerlab::Error>())
        .map(|e| e.category())
        .unwrap_or("internal")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = json!({"error": {"category": category(&e), "message": format!("{e:#}")}});
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
