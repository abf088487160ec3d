use std::path::PathBuf;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use cl_lab::config::{keys_help, ExperimentConfig, KEYS};
use cl_lab::error::{CliError, Result};
use cl_lab::experiments as ex;
use cl_lab::report::cmd_report;

#[derive(Parser, Debug)]
#[command(name = "cl-lab", version, about = "Deep linear network continual-learning experiments")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a seeded synthetic teacher task file.
    GenTask(GenTaskArgs),
    /// Alignment and bounds over the (depth, rank, trial) grid: phase.csv, phase_bounds.csv.
    #[command(after_help = keys_help())]
    PhaseTransition(ExpArgs),
    /// Measured alignment against the lower bounds: bounds.csv.
    #[command(after_help = keys_help())]
    Bounds(ExpArgs),
    /// Forgetting decomposition along new-task training: forgetting.csv.
    #[command(after_help = keys_help())]
    Forgetting(ExpArgs),
    /// Alignment of the cumulative plain-GD update per step: power.csv.
    #[command(after_help = keys_help())]
    PowerIter(ExpArgs),
    /// Continual learning with and without gradient projection: cl.csv, cl_summary.csv.
    #[command(after_help = keys_help())]
    ClRun(ExpArgs),
    /// Projection CDFs of update and Rademacher vectors: cdf.csv, cdf_mass.csv.
    #[command(after_help = keys_help())]
    Cdf(ExpArgs),
    /// Summary tables and SVG figures from the CSVs in a directory.
    Report {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenTaskArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output task file.
    #[arg(long)]
    out: PathBuf,
}

/// `--config FILE` plus one `--<key>` flag per config key.
#[derive(Debug, Default)]
struct ExpArgs {
    config: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ExpArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut s = ExpArgs::default();
        s.update_from_arg_matches(m)?;
        Ok(s)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        if let Some(p) = m.get_one::<PathBuf>("config") {
            self.config = Some(p.clone());
        }
        for (k, _) in KEYS {
            if let Some(v) = m.get_one::<String>(k) {
                self.overrides.push((k, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ExpArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value config file; flags override its entries"),
        );
        for (k, h) in KEYS {
            cmd = cmd.arg(Arg::new(*k).long(flag(k)).value_name("VALUE").help(*h));
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let outputs = match cli.cmd {
        Cmd::GenTask(a) => {
            let s = ex::cmd_gen_task(a.dim, a.n, a.rank, a.noise, a.seed, &a.out)?;
            println!("d={} n={} erank={:.6} -> {}", s.d, s.n, s.erank, a.out.display());
            return Ok(());
        }
        Cmd::PhaseTransition(a) => ex::cmd_phase_transition(&a.resolve()?)?,
        Cmd::Bounds(a) => ex::cmd_bounds(&a.resolve()?)?,
        Cmd::Forgetting(a) => ex::cmd_forgetting(&a.resolve()?)?,
        Cmd::PowerIter(a) => ex::cmd_power_iteration(&a.resolve()?)?,
        Cmd::ClRun(a) => ex::cmd_cl_run(&a.resolve()?)?,
        Cmd::Cdf(a) => ex::cmd_cdf(&a.resolve()?)?,
        Cmd::Report { dir } => {
            let r = cmd_report(&dir)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            r.written
        }
    };
    for o in outputs {
        println!("{}", o.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = e.exit_code();
        if matches!(e, CliError::AllTrialsFailed(_)) {
            eprintln!("see the warnings above for per-trial errors");
        }
        std::process::exit(code);
    }
}
