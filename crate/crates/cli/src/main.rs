//! `ndp-moe`: generate traces, build loss tables, and run or sweep simulations.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndp_moe::sim::PrefillMode;
use ndp_moe::Result;

use crate::config::{ExperimentConfig, ModelRef};

#[derive(Parser)]
#[command(
    name = "ndp-moe",
    version,
    about = "MoE decoding simulator for GPU + NDP systems"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the config file.
#[derive(Args, Default)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Model preset name.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequences to generate.
    #[arg(long, global = true)]
    num_sequences: Option<usize>,
    /// Prefill tokens per sequence.
    #[arg(long, global = true)]
    prompt_len: Option<usize>,
    /// Decode tokens per sequence.
    #[arg(long, global = true)]
    output_len: Option<usize>,
    /// Dirichlet concentration of per-sequence expert preferences.
    #[arg(long, global = true)]
    alpha_dir: Option<f64>,
    /// Weight of the prefill distribution in decode routing, in [0, 1].
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Weight of the shared popularity vector in each sequence's routing.
    #[arg(long, global = true)]
    global_share: Option<f64>,
    /// Trace file to read instead of generating traces.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Prebuilt loss table.
    #[arg(long, global = true)]
    loss_table: Option<PathBuf>,
    /// Seed of the synthetic experts behind the loss table.
    #[arg(long, global = true)]
    loss_seed: Option<u64>,
    /// Calibration inputs per expert for the loss table.
    #[arg(long, global = true)]
    calib_tokens: Option<usize>,
    /// Where built loss tables are cached.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Where prefill experts run: all-ndp, resident or gpu.
    #[arg(long, global = true, value_parser = parse_prefill)]
    prefill: Option<PrefillMode>,
    /// Forget residency between sequences.
    #[arg(long, global = true)]
    full_recharge: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "NDP_MOE_WORKERS")]
    workers: Option<usize>,
}

fn parse_prefill(s: &str) -> std::result::Result<PrefillMode, String> {
    match s {
        "all-ndp" | "all_ndp" => Ok(PrefillMode::AllNdp),
        "resident" => Ok(PrefillMode::Resident),
        "gpu" => Ok(PrefillMode::Gpu),
        _ => Err(format!("unknown prefill mode `{s}`")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTrace {
        /// Output file; defaults to <output dir>/traces.jsonl.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Build the per-expert quantization loss table.
    BuildLoss {
        /// Output file; defaults to the cache directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Simulate every configured policy once.
    Run {
        /// Output directory; defaults to the config's output dir.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Simulate the Cartesian product of the sweep axes.
    Sweep {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check a config and the trace or loss-table files it names.
    Validate,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.model {
            cfg.model = ModelRef::Preset(m.clone());
        }
        let g = &mut cfg.generator;
        set(&mut g.seed, self.seed);
        set(&mut g.num_sequences, self.num_sequences);
        set(&mut g.prompt_len, self.prompt_len);
        set(&mut g.output_len, self.output_len);
        set(&mut g.alpha_dir, self.alpha_dir);
        set(&mut g.rho, self.rho);
        set(&mut g.global_share, self.global_share);
        if self.trace.is_some() {
            cfg.trace = self.trace.clone();
        }
        if self.loss_table.is_some() {
            cfg.loss.path = self.loss_table.clone();
        }
        set(&mut cfg.loss.seed, self.loss_seed);
        set(&mut cfg.loss.calib_tokens, self.calib_tokens);
        set(&mut cfg.loss.cache_dir, self.cache_dir.clone());
        set(&mut cfg.sim.prefill, self.prefill);
        cfg.sim.full_recharge |= self.full_recharge;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.common.load()?;
    match cli.command {
        Command::GenTrace { out } => {
            cfg.model()?;
            cfg.generator.validate()?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join("traces.jsonl"));
            let n = commands::gen_trace(&cfg, &out)?;
            println!("{n} sequences -> {}", out.display());
        }
        Command::BuildLoss { out } => {
            let path = commands::build_loss(&cfg, out.as_deref())?;
            println!("loss table -> {}", path.display());
        }
        Command::Run { out } => {
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let reports = commands::run(&cfg, &dir)?;
            for r in &reports {
                println!(
                    "{:<24} e2e {:>10.4} s  decode {:>10.4} s  {:>8.2} tok/s",
                    r.policy, r.e2e_latency, r.decode_latency, r.decode_throughput
                );
            }
            println!("reports -> {}", dir.display());
        }
        Command::Sweep { out } => {
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let rows = commands::sweep(&cfg, &dir)?;
            println!("{} rows -> {}", rows.len(), dir.join("sweep.csv").display());
        }
        Command::Validate => {
            let summary = commands::validate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are invalid input, not I/O
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size worker pool: {e}");
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
