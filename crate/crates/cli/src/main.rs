//! `eoslab`: dataset generation, learning-rate sweeps, central-flow runs, trajectory analysis.
//!
//! Exit codes: 0 success, 2 invalid input, 3 divergence, 4 failed `--strict` check, 1 other.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::StrictFailure;
use crate::config::{parse_float_list, FloatList, ModelMode, RunConfig};

#[derive(Parser)]
#[command(name = "eoslab", version, about = "Rank-1 linear network edge-of-stability experiments")]
struct Cli {
    /// JSON run configuration, or a `manifest.json` from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated learning rates.
    #[arg(long, global = true, value_parser = parse_float_list)]
    eta: Option<FloatList>,
    /// Record every N steps.
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Exit with status 4 when a strict theory check fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    FullLinear,
    Reduced,
    Relu,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write spiked datasets (header JSON + CSV), one per seed.
    Generate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Matched-loss learning-rate sweep.
    Train {
        /// Dataset header written by `generate`; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Continue from a `checkpoint.json`, keeping its step numbering.
        #[arg(long, requires = "steps")]
        resume: Option<PathBuf>,
        /// Steps to run after `--resume`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        vector_stride: Option<usize>,
    },
    /// Rank-1 central flow with matching GD and gradient-flow branches.
    Centralflow {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Comma-separated branch times; an empty string disables branches.
        #[arg(long)]
        branch_times: Option<String>,
    },
    /// Phases, KTA tables, theory checks and plots for saved trajectories.
    Analyze {
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Average KTA curves over blocks of N records in plots.
        #[arg(long)]
        decimate: Option<usize>,
        /// Phase window.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Alignment argmax across a rank-one strength sweep on a spiked diagonal spectrum.
    SecularDemo {
        #[arg(long)]
        points: Option<usize>,
        /// Comma-separated spike eigenvalues above the bulk.
        #[arg(long, value_parser = parse_float_list)]
        spikes: Option<FloatList>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = &cli.eta {
        cfg.etas = e.0.clone();
        if let Some(&first) = e.0.first() {
            cfg.central_flow.eta = first;
        }
    }
    if let Some(s) = cli.stride {
        cfg.record_stride = s;
    }
    match &cli.cmd {
        Cmd::Train { model, vector_stride, .. } => {
            if let Some(m) = model {
                cfg.model = match m {
                    ModelArg::FullLinear => ModelMode::FullLinear,
                    ModelArg::Reduced => ModelMode::Reduced,
                    ModelArg::Relu => ModelMode::Relu,
                };
            }
            if vector_stride.is_some() {
                cfg.vector_stride = *vector_stride;
            }
        }
        Cmd::Centralflow { horizon, branch_times, .. } => {
            if let Some(h) = horizon {
                cfg.central_flow.horizon = *h;
            }
            if let Some(b) = branch_times {
                cfg.central_flow.branch_times = if b.trim().is_empty() {
                    Vec::new()
                } else {
                    parse_float_list(b).map_err(eoslab::Error::Validation)?.0
                };
            }
        }
        Cmd::Analyze { decimate, window, .. } => {
            if let Some(d) = decimate {
                cfg.decimate = *d;
            }
            if let Some(w) = window {
                cfg.phase_window = *w;
            }
        }
        Cmd::SecularDemo { points, spikes } => {
            if let Some(p) = points {
                cfg.warmup.points = *p;
            }
            if let Some(s) = spikes {
                cfg.warmup.spikes = s.0.clone();
            }
        }
        Cmd::Generate { count } => {
            if let Some(c) = count {
                cfg.data.count = *c;
            }
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match &cli.cmd {
        Cmd::Generate { .. } => commands::generate_cmd(&cfg).map(drop),
        Cmd::Train { data, resume, steps, .. } => {
            let resume = resume.as_deref().zip(*steps);
            commands::train_cmd(&cfg, data.as_deref(), resume).map(drop)
        }
        Cmd::Centralflow { data, .. } => commands::centralflow_cmd(&cfg, data.as_deref()).map(drop),
        Cmd::Analyze { trajectories, data, .. } => {
            commands::analyze_cmd(&cfg, trajectories, data.as_deref(), cli.strict).map(drop)
        }
        Cmd::SecularDemo { .. } => commands::secular_demo_cmd(&cfg).map(drop),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<StrictFailure>().is_some() {
        return 4;
    }
    match err.downcast_ref::<eoslab::Error>() {
        Some(eoslab::Error::Validation(_) | eoslab::Error::Json(_)) => 2,
        Some(eoslab::Error::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
