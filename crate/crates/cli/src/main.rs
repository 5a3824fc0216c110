//! `scene-novelty`: detect, sweep, explain and report over scene pools.
//!
//! Exit codes: 0 success, 2 config or usage, 3 data, 4 transport, 5 internal.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scene_novelty::pool_io::PoolFormat;

use crate::commands::Preset;
use crate::config::{OutputFormat, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "scene-novelty", version, about = "Novel-scene detection and explanation over image embeddings")]
struct Cli {
    /// TOML run configuration. Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the deterministic mock clients instead of network services.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Format of the summary printed to stdout.
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PoolArgs {
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, value_parser = parse_pool_format)]
    pool_format: Option<PoolFormat>,
}

#[derive(Debug, Args)]
struct PlantedArgs {
    #[arg(long)]
    planted_id: Option<String>,
    /// Tag carried by exactly one scene, the planted one.
    #[arg(long)]
    planted_tag: Option<String>,
    /// Set category shown by `report`.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Embed the images listed in a CSV (id,source_uri,tags) into a pool.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_parser = parse_pool_format)]
        pool_format: Option<PoolFormat>,
        #[arg(long)]
        mock_dim: Option<usize>,
    },
    /// Cluster a pool and report its novelty set at one threshold.
    Detect {
        #[command(flatten)]
        pool: PoolArgs,
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        #[command(flatten)]
        planted: PlantedArgs,
    },
    /// Run one trial per threshold and select the best.
    Sweep {
        #[command(flatten)]
        pool: PoolArgs,
        /// Comma-separated ascending thresholds.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        #[command(flatten)]
        planted: PlantedArgs,
    },
    /// Explain every singleton novelty id.
    Explain {
        #[command(flatten)]
        pool: PoolArgs,
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f64>,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        /// Take tau, min_cluster_size and the novelty set from a detect report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        consensus_k: Option<usize>,
        #[arg(long)]
        include_co_novel: bool,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Explain only these ids.
        #[arg(long = "id")]
        ids: Vec<String>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        templates_dir: Option<PathBuf>,
    },
    /// Tabulate trial or sweep result files.
    Report { inputs: Vec<PathBuf> },
    /// Generate a synthetic pool with ground-truth tags.
    Synth {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_parser = parse_pool_format)]
        pool_format: Option<PoolFormat>,
    },
}

fn parse_pool_format(s: &str) -> Result<PoolFormat, String> {
    s.parse::<PoolFormat>().map_err(|e| e.to_string())
}

fn apply_pool(cfg: &mut RunConfig, p: PoolArgs) {
    if p.pool.is_some() {
        cfg.pool = p.pool;
    }
    if p.pool_format.is_some() {
        cfg.pool_format = p.pool_format;
    }
}

fn apply_planted(cfg: &mut RunConfig, p: PlantedArgs) {
    if p.planted_id.is_some() {
        cfg.planted_id = p.planted_id;
    }
    if p.planted_tag.is_some() {
        cfg.planted_tag = p.planted_tag;
    }
    if p.label.is_some() {
        cfg.label = p.label;
    }
}

fn set_tau(cfg: &mut RunConfig, tau: Option<f64>) {
    if tau.is_some() {
        cfg.tau = tau;
        cfg.tau_grid = None;
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.mock {
        cfg.mock = Some(true);
    }
    if cli.out_dir.is_some() {
        cfg.out_dir = cli.out_dir;
    }
    if cli.format.is_some() {
        cfg.format = cli.format;
    }
    cfg.seed = Some(cfg.seed());
    match cli.command {
        Command::Ingest { input, output, pool_format, mock_dim } => {
            if mock_dim.is_some() {
                cfg.mock_dim = mock_dim;
            }
            commands::ingest(&cfg, &input, output.as_deref(), pool_format)
        }
        Command::Detect { pool, tau, min_cluster_size, planted } => {
            apply_pool(&mut cfg, pool);
            apply_planted(&mut cfg, planted);
            set_tau(&mut cfg, tau);
            cfg.min_cluster_size = min_cluster_size.or(cfg.min_cluster_size);
            commands::detect(&cfg)
        }
        Command::Sweep { pool, grid, min_cluster_size, planted } => {
            apply_pool(&mut cfg, pool);
            apply_planted(&mut cfg, planted);
            if grid.is_some() {
                cfg.tau_grid = grid;
                cfg.tau = None;
            }
            cfg.min_cluster_size = min_cluster_size.or(cfg.min_cluster_size);
            commands::sweep(&cfg)
        }
        Command::Explain { pool, tau, min_cluster_size, report, consensus_k, include_co_novel, parallelism, ids, cache_dir, templates_dir } => {
            apply_pool(&mut cfg, pool);
            set_tau(&mut cfg, tau);
            cfg.min_cluster_size = min_cluster_size.or(cfg.min_cluster_size);
            let e = &mut cfg.explain;
            e.consensus_k = consensus_k.or(e.consensus_k);
            if include_co_novel {
                e.include_co_novel = Some(true);
            }
            e.parallelism = parallelism.or(e.parallelism);
            if !ids.is_empty() {
                e.ids = Some(ids);
            }
            e.cache_dir = cache_dir.or(e.cache_dir.take());
            e.templates_dir = templates_dir.or(e.templates_dir.take());
            commands::explain(&cfg, report.as_deref())
        }
        Command::Report { inputs } => commands::report(&cfg, &inputs),
        Command::Synth { preset, dim, output, pool_format } => commands::synth(&cfg, preset, dim, output.as_deref(), pool_format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(stdout)) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error: {}", CliError::Internal("unexpected panic".into()));
            ExitCode::from(5)
        }
    }
}
