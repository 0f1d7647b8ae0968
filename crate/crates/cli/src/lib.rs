//! Command-line pipeline: sensitivity scan, norm profiling, register curation and search,
//! evaluation and report merging.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{FixtureSpec, Step};
use crate::config::{parse_bits, MetricKind, Overrides, RunConfig};
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "regcache", version, about = "Register caching for quantized ViT encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

/// Flags override the config file, which overrides the built-in defaults.
#[derive(Debug, Args, Default)]
pub struct Flags {
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Weight and activation bits, e.g. `8,8`.
    #[arg(long, global = true, value_name = "W,A")]
    pub bits: Option<String>,
    /// `zero_shot`, `fidelity` or `recall@K`.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-site quantization sensitivity; writes sensitivity.csv and norms.csv.
    Sensitivity,
    /// Token norm, sink position and outlier cosine statistics.
    Profile,
    /// Register candidates at the blocks before the sensitive one.
    Curate,
    /// Grid search; writes register_cache.rtc and search_trace.csv.
    Search,
    /// Full-precision, quantized and quantized+cache metrics; writes eval.json.
    Eval,
    /// Merges run artifacts into report.json and report.csv.
    Report {
        /// Defaults to the configured output directory.
        run_dir: Option<PathBuf>,
    },
    /// Writes a planted-outlier demo model, datasets and config into --out.
    MakeFixture {
        #[arg(long, default_value_t = 64)]
        probe: usize,
        #[arg(long, default_value_t = 16)]
        pool: usize,
    },
}

impl Flags {
    fn overrides(&self) -> CliResult<Overrides> {
        Ok(Overrides {
            model: self.model.clone(),
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
            bits: self.bits.as_deref().map(parse_bits).transpose()?,
            metric: self.metric.as_deref().map(str::parse::<MetricKind>).transpose()?,
            cache: self.cache.clone(),
        })
    }
}

fn in_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Command::MakeFixture { probe, pool } = cli.command {
        let dir = cli
            .flags
            .out
            .clone()
            .ok_or_else(|| CliError::Config("make-fixture needs --out".into()))?;
        let spec = FixtureSpec {
            seed: cli.flags.seed.unwrap_or(7),
            probe,
            pool,
        };
        let cfg = commands::make_fixture(&dir, &spec)?;
        println!("{}", cfg.display());
        return Ok(());
    }
    let cfg = RunConfig::load(cli.flags.config.as_deref(), &cli.flags.overrides()?)?;
    let step = match &cli.command {
        Command::Sensitivity => Step::Sensitivity,
        Command::Profile => Step::Profile,
        Command::Curate => Step::Curate,
        Command::Search => Step::Search,
        Command::Eval => Step::Eval,
        Command::Report { run_dir } => {
            return commands::report(run_dir.as_ref().unwrap_or(&cfg.out_dir));
        }
        Command::MakeFixture { .. } => unreachable!(),
    };
    in_pool(cfg.threads, || commands::run_step(step, &cfg))?
}
