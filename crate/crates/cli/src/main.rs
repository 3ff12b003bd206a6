//! Command-line driver for the spfnls simulator.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spfnls_core::io::RunConfig;
use spfnls_core::{Error, Result};

/// Environment variable holding the worker thread count.
const WORKERS_ENV: &str = "SPFNLS_WORKERS";

#[derive(Parser)]
#[command(name = "spfnls", version, about = "Stochastic parametrically forced NLS simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set noise.sigma=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory, same as `--set output.dir=...`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Base seed, same as `--set base_seed=...`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one path and check the a priori bound.
    Simulate(Common),
    /// Build the linearization and report spectrum and decay fit.
    Spectrum(Common),
    /// Run the second-order expansion along one path.
    Expand(Common),
    /// Run a named study.
    Experiment {
        /// Study name; overrides `experiment.study`.
        study: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-check the content hashes of output files or directories.
    Verify {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Print the default configuration.
    Defaults,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut sets = self.sets.clone();
        if let Some(o) = &self.out {
            sets.push(format!("output.dir={:?}", o.display().to_string()));
        }
        if let Some(s) = self.seed {
            sets.push(format!("base_seed={s}"));
        }
        RunConfig::from_toml_with_overrides(&text, &sets)
    }
}

fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Simulate(c) => commands::simulate(&c.load()?),
        Command::Spectrum(c) => commands::spectrum(&c.load()?),
        Command::Expand(c) => commands::expand(&c.load()?),
        Command::Experiment { study, common } => {
            let mut cfg = common.load()?;
            if let Some(s) = study {
                cfg.experiment.study = s;
            }
            commands::experiment(&cfg)
        }
        Command::Verify { paths } => commands::verify(&paths),
        Command::Defaults => {
            print!("{}", spfnls_core::io::default_config_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
