//! `nefem` command-line front end.

mod checks;
mod config;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nefem::NefemError;

use config::{parse_seeds, resolve, Experiment};
use experiment::Options;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Check(String),
}

impl From<NefemError> for CliError {
    fn from(e: NefemError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "nefem", version, about = "Finite elements with trainable network enrichments")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oscillatory coefficient, plain training.
    Ex1(RunArgs),
    /// Locally oscillating solution, adaptive training.
    Ex2(RunArgs),
    /// Interface problem with quasi-distance input.
    Ex3(RunArgs),
    /// Energy error over a mesh sequence for the interface problem.
    Convergence(RunArgs),
    /// Shortcut parameter gradient against finite differences.
    Gradcheck(GradArgs),
    /// Monomial exactness of the embedded quadrature rules.
    Quadcheck(QuadArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file overriding the embedded defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Seeds, `0,1,2` or `0..6`.
    #[arg(long)]
    seeds: Option<String>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel seed runs.
    #[arg(long)]
    workers: Option<usize>,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
    /// Fill the wall_ms history column.
    #[arg(long)]
    timing: bool,
    /// Write the final per-element estimator of each seed.
    #[arg(long)]
    dump_estimator: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value = "0..5")]
    seeds: String,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Hidden widths of the checked networks.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 20])]
    hidden: Vec<usize>,
    /// Frequency scales of the two hidden layers.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 2])]
    scales: Vec<u32>,
}

#[derive(Args)]
struct QuadArgs {
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Relative corruption of the first weight of every rule (negative control).
    #[arg(long, default_value_t = 0.0, hide = true)]
    perturb_weight: f64,
}

fn run_cmd(exp: Experiment, a: RunArgs) -> Result<(), CliError> {
    let user = a.config.as_ref().map(std::fs::read_to_string).transpose()?;
    let mut r = resolve(exp, user.as_deref())?;
    if let Some(s) = &a.seeds {
        r.seeds = parse_seeds(s)?;
        r.table.insert("seeds".into(), toml::Value::Array(r.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()));
    }
    if let Some(t) = a.epochs {
        r.run.epochs = t;
        r.table.insert("epochs".into(), toml::Value::Integer(t as i64));
    }
    if let Some(w) = a.workers {
        if w == 0 {
            return Err(CliError::Config("--workers: must be at least 1".into()));
        }
        r.workers = w;
        r.table.insert("workers".into(), toml::Value::Integer(w as i64));
    }
    if a.timing {
        r.run.record_timing = true;
        r.table.insert("record_timing".into(), toml::Value::Boolean(true));
    }
    if r.seeds.is_empty() {
        return Err(CliError::Config("seeds: empty".into()));
    }
    if a.print_config {
        print!("{}", toml::to_string(&r.table).map_err(|e| CliError::Config(e.to_string()))?);
        return Ok(());
    }
    let opts = Options { out: a.out, overwrite: a.overwrite, dump_estimator: a.dump_estimator };
    match exp {
        Experiment::Convergence => experiment::run_convergence(&r, &opts),
        _ => experiment::run_experiment(exp, &r, &opts),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Ex1(a) => run_cmd(Experiment::Ex1, a),
        Command::Ex2(a) => run_cmd(Experiment::Ex2, a),
        Command::Ex3(a) => run_cmd(Experiment::Ex3, a),
        Command::Convergence(a) => run_cmd(Experiment::Convergence, a),
        Command::Gradcheck(a) => {
            if a.hidden.len() != 2 || a.scales.len() != 2 {
                return Err(CliError::Config("--hidden and --scales take two comma-separated values".into()));
            }
            let dims = [2, a.hidden[0], a.hidden[1], 1];
            if checks::gradcheck(&parse_seeds(&a.seeds)?, a.step, a.tol, dims, [a.scales[0], a.scales[1]])? {
                Ok(())
            } else {
                Err(CliError::Check("gradient check failed".into()))
            }
        }
        Command::Quadcheck(a) => {
            if checks::quadcheck(a.tol, a.perturb_weight)? {
                Ok(())
            } else {
                Err(CliError::Check("quadrature check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("NEFEM_LOG").init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
