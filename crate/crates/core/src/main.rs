use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maxclust::harness::{run, ExperimentConfig, Kind};
use maxclust::Error;

#[derive(Parser)]
#[command(name = "maxclust", version, about = "Maximal-cluster statistics for site percolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample fields and record cluster censuses.
    Sample(Opts),
    /// Replicas of the largest cluster, optionally against the Gumbel law.
    Extremes(Opts),
    /// Origin-cluster tail sampling and rate fits.
    Tails(Opts),
    /// Hitting times of cluster events and the exponential law.
    Hitting(Opts),
    /// Boundary-condition discrepancy of the largest cluster.
    BcCompare(Opts),
    /// Exact laws by enumeration.
    Oracle(Opts),
    /// Runs one experiment over a parameter grid.
    Sweep(Opts),
    /// Prints the default configuration of an experiment.
    Defaults {
        #[arg(value_enum)]
        kind: KindArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Sample,
    Extremes,
    Tails,
    Hitting,
    BcCompare,
    Oracle,
}

#[derive(clap::Args)]
struct Opts {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, opts) = match cli.command {
        Command::Sample(o) => (Kind::Sample, o),
        Command::Extremes(o) => (Kind::Extremes, o),
        Command::Tails(o) => (Kind::Tails, o),
        Command::Hitting(o) => (Kind::Hitting, o),
        Command::BcCompare(o) => (Kind::BcCompare, o),
        Command::Oracle(o) => (Kind::Oracle, o),
        Command::Sweep(o) => (Kind::Sweep, o),
        Command::Defaults { kind } => {
            let kind = match kind {
                KindArg::Sample => Kind::Sample,
                KindArg::Extremes => Kind::Extremes,
                KindArg::Tails => Kind::Tails,
                KindArg::Hitting => Kind::Hitting,
                KindArg::BcCompare => Kind::BcCompare,
                KindArg::Oracle => Kind::Oracle,
            };
            print!("{}", ExperimentConfig::new(kind).to_toml());
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match load(kind, &opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("maxclust: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(w) = opts.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("maxclust: cannot start {w} workers: {e}");
            return ExitCode::from(3);
        }
    }
    let dir = cfg.out_dir();
    match run(&cfg, &dir) {
        Ok(out) => {
            println!("{}", out.dir.display());
            print!("{}", out.summary.to_csv());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("maxclust: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("maxclust: run failed: {e}");
            ExitCode::from(3)
        }
    }
}

fn load(kind: Kind, opts: &Opts) -> maxclust::Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path, Some(kind))?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        return Err(Error::Config {
            key: "kind".into(),
            reason: format!("config is `{}` but the command is `{}`", cfg.kind.as_str(), kind.as_str()),
        });
    }
    if let Some(s) = opts.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out = Some(o.clone());
    }
    if opts.workers == Some(0) {
        return Err(Error::Config {
            key: "--workers".into(),
            reason: "must be at least 1".into(),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}
