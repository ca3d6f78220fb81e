//! `laser`: run routing experiments, sweep candidate-pool sizes, analyze gate traces
//! and generate synthetic traces.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, malformed trace), 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use laser_core::config::{ConfigFile, PlacementSection, PolicyName};
use laser_core::sim::{self, Generator, LoadReset, Phase, PolicySummary, Summary, SyntheticSpec};
use laser_core::{
    aggregate_layer_stats, suggest_parameters, LayerBands, Params, RegimeThresholds, TrimMode,
};

const DEFAULT_OUT_DIR: &str = "laser-out";

#[derive(Parser)]
#[command(
    name = "laser",
    version,
    about = "Load- and score-aware MoE routing laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Replay a config's workload for several candidate-pool sizes.
    Sweep(RunArgs),
    /// Per-layer gate statistics of a trace.
    Analyze(AnalyzeArgs),
    /// Write a synthetic trace file.
    Gen(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "LASER_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Seed for synthetic generation and random trimming.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["vanilla", "load-only", "laser"])]
    policy: Option<String>,
    /// Comma-separated candidate-pool sizes.
    #[arg(long, value_delimiter = ',')]
    c_list: Option<Vec<usize>>,
    #[arg(long)]
    preset: Option<String>,
    /// `uniform` or `flops:<path>`.
    #[arg(long)]
    weights: Option<String>,
    /// CSV placement matrix, one GPU per line.
    #[arg(long)]
    placement: Option<PathBuf>,
    #[arg(long, value_enum)]
    load_reset: Option<ResetArg>,
    /// Also run vanilla and load-only.
    #[arg(long)]
    baselines: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResetArg {
    Batch,
    Cumulative,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
    All,
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, env = "LASER_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    phase: PhaseArg,
    #[arg(long, default_value_t = 0.6)]
    dominance: f64,
    #[arg(long, default_value_t = 0.8)]
    plateau: f64,
    /// Print band parameters suggested from the statistics.
    #[arg(long)]
    suggest: bool,
    /// Fraction of layers per band that should expand.
    #[arg(long, default_value_t = 0.5)]
    target_rate: f64,
    #[arg(long, default_value_t = 0.6)]
    t_fix: f64,
    /// Candidate-pool cap for suggestions (defaults to min(k + 2, n)).
    #[arg(long)]
    c: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Dirichlet(alpha) in every layer.
    Flat,
    /// Spiked in every layer.
    Spiked,
    /// Spiked early and final thirds, Dirichlet(alpha) middle.
    Banded,
}

#[derive(Args)]
struct GenArgs {
    /// Destination; `.ndjson` or `.jsonl` selects the text format.
    #[arg(long)]
    out: PathBuf,
    /// Take the workload from a config's `[workload.synthetic]` section.
    #[arg(long, conflicts_with_all = ["layers", "experts", "profile"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    #[arg(long, default_value_t = 10)]
    batches: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "banded")]
    profile: Profile,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    p_head: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha_tail: f64,
    #[arg(long, value_enum, default_value = "decode")]
    phase: PhaseArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args, false),
        Command::Sweep(args) => cmd_run(args, true),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Gen(args) => cmd_gen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.chain().any(|e| {
                e.downcast_ref::<laser_core::Error>()
                    .is_some_and(laser_core::Error::is_config)
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn apply_overrides(cfg: &mut ConfigFile, args: &RunArgs, sweep: bool) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(policy) = &args.policy {
        cfg.policy = policy.parse()?;
    }
    if let Some(name) = &args.preset {
        cfg.preset = Some(name.clone());
        if let Some(l) = cfg.laser.as_mut() {
            l.bands.clear();
        }
    }
    if let Some(w) = &args.weights {
        cfg.set_weights(w)?;
    }
    if let Some(p) = &args.placement {
        cfg.placement = Some(PlacementSection {
            matrix: None,
            path: Some(p.clone()),
        });
    }
    if let Some(r) = args.load_reset {
        cfg.load_reset = match r {
            ResetArg::Batch => LoadReset::Batch,
            ResetArg::Cumulative => LoadReset::Cumulative,
        };
    }
    if args.baselines {
        cfg.baselines = true;
    }
    if let Some(list) = &args.c_list {
        cfg.sweep = Some(list.clone());
    }
    if sweep {
        cfg.policy = PolicyName::Laser;
        cfg.baselines = true;
        let list = cfg.sweep.take().ok_or_else(|| {
            laser_core::Error::Config("sweep needs --c-list or a `sweep` list in the config".into())
        })?;
        let mut seen = Vec::with_capacity(list.len());
        for c in list {
            if seen.contains(&c) {
                eprintln!("warning: duplicate c = {c} ignored");
            } else {
                seen.push(c);
            }
        }
        cfg.sweep = Some(seen);
    }
    Ok(())
}

fn cmd_run(args: RunArgs, sweep: bool) -> Result<()> {
    let mut cfg = ConfigFile::load(&args.config)?;
    apply_overrides(&mut cfg, &args, sweep)?;
    let resolved = cfg.resolve()?;
    let out_dir = args
        .out_dir
        .clone()
        .or(resolved.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let output = sim::run_experiment(&resolved.experiment)?;
    let summary = sim::write_artifacts(&out_dir, &resolved.experiment, &output)?;
    let effective = out_dir.join("effective_config.toml");
    std::fs::write(&effective, resolved.effective.to_toml())
        .with_context(|| format!("writing {}", effective.display()))?;

    print_summary(&summary);
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

fn print_summary(summary: &Summary) {
    println!(
        "{:<10} {:>4} {:>10} {:>10} {:>10}",
        "policy", "c", "p50", "p95", "mean"
    );
    let row = |p: &PolicySummary| {
        let c = p.c.map_or("-".to_string(), |c| c.to_string());
        match p.i_agg {
            Some(s) => println!(
                "{:<10} {:>4} {:>10.4} {:>10.4} {:>10.4}",
                p.policy, c, s.p50, s.p95, s.mean
            ),
            None => println!(
                "{:<10} {:>4} {:>10} {:>10} {:>10}",
                p.policy, c, "-", "-", "-"
            ),
        }
    };
    summary.policies.iter().for_each(row);
    summary.sweep.iter().for_each(row);
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let trace = sim::read_trace(&args.trace)?;
    let n = trace.num_experts();
    let thresholds = RegimeThresholds {
        dominance: args.dominance,
        plateau: args.plateau,
    };
    thresholds.validate()?;
    let keep = |p: Phase| match args.phase {
        PhaseArg::All => true,
        PhaseArg::Prefill => p == Phase::Prefill,
        PhaseArg::Decode => p == Phase::Decode,
    };
    let tokens = trace
        .records
        .iter()
        .filter(|r| keep(r.phase))
        .map(|r| (usize::from(r.layer), &r.scores));
    let stats = aggregate_layer_stats(tokens, args.k, thresholds)?;

    let out_dir = args
        .out_dir
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join("layerstats.csv");
    std::fs::write(&path, sim::output::layerstats_csv(&stats))
        .with_context(|| format!("writing {}", path.display()))?;

    println!(
        "{:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "layer", "mean_Mk", "H_p50", "single", "plateau", "smooth"
    );
    for s in &stats {
        let [single, plateau, smooth] = s.regime_fractions();
        println!(
            "{:>5} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.3}",
            s.layer, s.mean_mk, s.entropy_p50, single, plateau, smooth
        );
    }

    if args.suggest {
        let c = args.c.unwrap_or((args.k + 2).min(n));
        let template = Params::new(args.k, 1.0, args.t_fix, c, TrimMode::Top, 0);
        template.validate(n)?;
        let bands = LayerBands::thirds(trace.num_layers())?;
        let bp = suggest_parameters(&stats, &bands, args.target_rate, &template)?;
        println!("suggested bands (k = {}, c = {c}):", args.k);
        for b in bp.bands() {
            println!(
                "  layers [{}..{}]: eps_high = {:.4}, t_fix = {}",
                b.first, b.last, b.params.eps_high, b.params.t_fix
            );
        }
    }
    println!("layer statistics written to {}", path.display());
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => synthetic_from_config(path)?,
        None => {
            let dirichlet = Generator::Dirichlet { alpha: args.alpha };
            let spiked = Generator::Spiked {
                p_head: args.p_head,
                alpha_tail: args.alpha_tail,
            };
            let (l, n, t, b) = (args.layers, args.experts, args.tokens, args.batches);
            match args.profile {
                Profile::Flat => SyntheticSpec::uniform(l, n, t, b, dirichlet, 0),
                Profile::Spiked => SyntheticSpec::uniform(l, n, t, b, spiked, 0),
                Profile::Banded => SyntheticSpec::banded(l, n, t, b, spiked, dirichlet, 0)?,
            }
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.config.is_none() {
        spec.phase = match args.phase {
            PhaseArg::Prefill => Phase::Prefill,
            _ => Phase::Decode,
        };
    }
    spec.validate()?;
    let records = sim::generate_synthetic(&spec)?.collect::<laser_core::Result<Vec<_>>>()?;
    sim::write_records(&args.out, spec.header(), &records)?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn synthetic_from_config(path: &Path) -> Result<SyntheticSpec> {
    let cfg = ConfigFile::load(path)?;
    cfg.workload.synthetic.ok_or_else(|| {
        laser_core::Error::Config(format!(
            "{}: no [workload.synthetic] section",
            path.display()
        ))
        .into()
    })
}
