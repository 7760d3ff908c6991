use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smallball::runner::{run, Experiment, ExperimentConfig, Threads};
use smallball::Error;

#[derive(Parser)]
#[command(
    name = "smallball",
    version,
    about = "Small-ball experiments for heavy-tailed least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trimmed-mean stability and failure rates
    Slb(Common),
    /// Good-block counts over a net of directions
    Blocks {
        #[command(flatten)]
        common: Common,
        /// Sample size
        #[arg(long = "N")]
        n_samples: Option<usize>,
        /// Number of blocks
        #[arg(long = "n")]
        n_blocks: Option<usize>,
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        net_size: Option<usize>,
    },
    /// Smallest-eigenvalue scaling grid
    Sv(Common),
    /// Block conclusion across sample sizes
    VerifyMain(Common),
    /// Empirical risk minimization
    Erm(Common),
    /// Block tournament against ERM
    Tournament(Common),
    /// Critical radius and multiplier radius
    FixedPoint(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long, alias = "grid")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads, or "auto"
    #[arg(long)]
    threads: Option<String>,
    /// Directory for rows, summary and report files
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_threads(s: &str) -> Result<Threads, Error> {
    if s == "auto" {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(k) if k > 0 => Ok(Threads::Count(k)),
        _ => Err(Error::config(
            "threads",
            format!("{s:?} is not a positive integer or \"auto\""),
        )),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let (experiment, common, overrides) = match cli.command {
        Command::Slb(c) => (Experiment::Slb, c, vec![]),
        Command::Blocks {
            common,
            n_samples,
            n_blocks,
            xi,
            net_size,
        } => {
            let mut o = vec![];
            if let Some(v) = n_samples {
                o.push(("n_samples", toml::Value::Integer(v as i64)));
            }
            if let Some(v) = n_blocks {
                o.push(("n_blocks", toml::Value::Integer(v as i64)));
            }
            if let Some(v) = xi {
                o.push(("xi", toml::Value::Float(v)));
            }
            if let Some(v) = net_size {
                o.push(("net_size", toml::Value::Integer(v as i64)));
            }
            (Experiment::Blocks, common, o)
        }
        Command::Sv(c) => (Experiment::Sv, c, vec![]),
        Command::VerifyMain(c) => (Experiment::VerifyMain, c, vec![]),
        Command::Erm(c) => (Experiment::Erm, c, vec![]),
        Command::Tournament(c) => (Experiment::Tournament, c, vec![]),
        Command::FixedPoint(c) => (Experiment::FixedPoint, c, vec![]),
    };
    let mut cfg = ExperimentConfig::from_file(&common.config, Some(experiment))?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(t) = &common.threads {
        cfg.threads = parse_threads(t)?;
    }
    for (k, v) in overrides {
        cfg.set_param(k, v);
    }
    cfg.validate()?;
    let result = run(&cfg)?;
    if let Some(dir) = &common.out {
        for path in result.write_artifacts(dir)? {
            log::info!("wrote {}", path.display());
        }
    }
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}
