//! `sira`: ingest, train, predict, verify and render isoscapes from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (model format 1)");

#[derive(Debug, Parser)]
#[command(name = "sira", version = VERSION, about = "Isoscape modelling and isotope origin verification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// `key = value` configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every stochastic step
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Gb,
    Mtg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world with a train/test split
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach aggregated atmospheric features to samples
    Ingest {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        atmosphere: PathBuf,
        /// Output dataset bundle CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset bundle
    Train {
        #[arg(value_enum)]
        kind: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target isotope for `gb`
        #[arg(long, default_value = "d18O")]
        isotope: String,
    },
    /// Predict every modelled isotope for a dataset bundle
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test claimed origins against an MTG model
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        atmosphere: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render mean and std rasters of one isotope
    Isoscape {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        atmosphere: PathBuf,
        /// lat_min,lat_max,lon_min,lon_max
        #[arg(long)]
        bounds: String,
        #[arg(long)]
        isotope: String,
        /// Writes PREFIX_mean.asc and PREFIX_std.asc
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Write feature importance and task dependency of an MTG model
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// False-claim detection accuracy against displacement distance
    Experiment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        atmosphere: PathBuf,
        /// Held-out samples CSV
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-fold cross-validation of one variant or the full ablation
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// boosting, gpr, gb, mvgp or mtg; all when absent
        #[arg(long)]
        model: Option<String>,
    },
}

pub enum CliError {
    Usage(String),
    Domain(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<sira_core::Error> for CliError {
    fn from(e: sira_core::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    for kv in &g.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("seed", &seed.to_string(), "--seed")?;
    }
    if let Some(t) = g.threads {
        cfg.set("threads", &t.to_string(), "--threads")?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        // Fails only if the pool already exists, which it cannot here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    log::info!("resolved configuration:\n{}", cfg.dump().trim_end());
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Ingest { samples, atmosphere, out } => commands::ingest(&cfg, &samples, &atmosphere, &out),
        Command::Train { kind, data, out, isotope } => match kind {
            ModelKind::Gb => commands::train_gb(&cfg, &data, &out, &isotope),
            ModelKind::Mtg => commands::train_mtg(&cfg, &data, &out),
        },
        Command::Predict { model, data, out } => commands::predict(&model, &data, &out),
        Command::Verify { model, claims, atmosphere, out } => commands::verify(&cfg, &model, &claims, &atmosphere, &out),
        Command::Isoscape { model, atmosphere, bounds, isotope, out_prefix } => {
            commands::isoscape(&cfg, &model, &atmosphere, &bounds, &isotope, &out_prefix)
        }
        Command::Importance { model, out_dir } => commands::importance(&model, &out_dir),
        Command::Experiment { model, atmosphere, test, out } => commands::experiment(&cfg, &model, &atmosphere, &test, &out),
        Command::Eval { data, out_dir, model } => commands::eval(&cfg, &data, &out_dir, model.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
