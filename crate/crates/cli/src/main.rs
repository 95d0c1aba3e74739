//! Configuration-driven command line for the panel policy-impact engine.
//!
//! One TOML file describes the whole run; subcommands execute stages of the
//! pipeline and write deterministic tables plus a run manifest. Exit codes:
//! 0 success, 2 configuration error, 3 data error, 4 numerical error.

mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use paneldd_core::config::RunConfig;
use paneldd_core::error::{Error, Result};
use paneldd_core::synth::{write_raw_fixtures, RawSpec};

use pipeline::Ctx;

#[derive(Parser)]
#[command(
    name = "paneldd",
    version,
    about = "Panel difference-in-differences engine: balanced-panel construction, weighted \
             two-way fixed-effects estimation, event studies, staggered-adoption diagnostics, \
             counterfactual projection, and block-bootstrap inference"
)]
struct Cli {
    /// Run-configuration file (TOML).
    #[arg(short, long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Override the output directory from the config file.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Override the bootstrap seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the bootstrap replicate count.
    #[arg(long, global = true)]
    bootstrap_b: Option<usize>,

    /// Worker threads (default: all cores). Results are identical for any
    /// thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load raw tables (or generate synthetic data), smooth, aggregate, and
    /// write the canonical panel file.
    Ingest,
    /// Estimate the design grid, attendance interactions, subclass runs,
    /// and heterogeneity sweeps.
    Estimate,
    /// Estimate closure and reopening event studies.
    Eventstudy,
    /// Decompose the reopening coefficient into pairwise comparisons.
    Bacon,
    /// Report treated-cell estimand weights and the negative-weight share.
    Dcdh,
    /// Fit counterfactual projections, select models, and difference
    /// against actuals.
    Counterfactual,
    /// Bootstrap confidence intervals for the headline coefficients.
    Bootstrap,
    /// Generate the synthetic panel configured under [inputs.synth].
    Synth {
        /// Also write record-level fixture CSVs (victims, population,
        /// school status, epi, quarantine) into this directory.
        #[arg(long)]
        raw_dir: Option<PathBuf>,
        /// Seed for the record-level fixture generator.
        #[arg(long, default_value_t = 20)]
        raw_seed: u64,
    },
    /// Run the whole pipeline in order.
    All,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }

    // raw fixture generation stands alone: no config required
    if let Command::Synth {
        raw_dir: Some(dir),
        raw_seed,
    } = &cli.command
    {
        let spec = RawSpec {
            seed: *raw_seed,
            ..RawSpec::default()
        };
        write_raw_fixtures(&spec, dir)?;
        eprintln!("wrote raw fixtures to {}", dir.display());
        return Ok(());
    }

    let (mut config, text) = RunConfig::load(&cli.config)?;
    let mut overrides = Vec::new();
    if let Some(dir) = &cli.output_dir {
        config.output.dir = dir.clone();
        overrides.push(format!("output.dir={}", dir.display()));
    }
    if let Some(seed) = cli.seed {
        config.bootstrap.seed = seed;
        overrides.push(format!("bootstrap.seed={seed}"));
    }
    if let Some(b) = cli.bootstrap_b {
        config.bootstrap.b = b;
        overrides.push(format!("bootstrap.b={b}"));
    }
    for o in &overrides {
        eprintln!("override: {o}");
    }

    let mut ctx = Ctx::new(&cli.config, overrides, config, text)?;
    match cli.command {
        Command::Ingest => pipeline::run_ingest(&mut ctx)?,
        Command::Estimate => pipeline::run_estimate(&mut ctx)?,
        Command::Eventstudy => pipeline::run_eventstudy(&mut ctx)?,
        Command::Bacon => pipeline::run_bacon(&mut ctx)?,
        Command::Dcdh => pipeline::run_dcdh(&mut ctx)?,
        Command::Counterfactual => pipeline::run_counterfactual(&mut ctx)?,
        Command::Bootstrap => pipeline::run_bootstrap(&mut ctx)?,
        Command::Synth { .. } => pipeline::run_synth(&mut ctx)?,
        Command::All => pipeline::run_all(&mut ctx)?,
    }
    ctx.write_manifest()
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
