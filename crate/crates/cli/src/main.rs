use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dipper_core::config::{apply_assignments, assignments};
use dipper_core::harness::{read_csv, render_report, run_experiment, sweep, write_csv, RunReport, SweepParam};
use dipper_core::rng::{stream, Stream};
use dipper_core::tabular::run_oracle_suite;
use dipper_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "dipper", version, about = "Hierarchical RL with preference-trained subgoal policies on gridworld mazes")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm over the configured seeds.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for report.csv and SVG charts; CSV goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of lambda or beta with the same seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values, e.g. `0,0.5,5`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the soft dynamic-programming identities on random tabular MDPs.
    OracleVerify {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the verification log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Redraw SVG charts from an existing report CSV.
    Render {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `reference` or `desk`; applied before any other key.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    algorithm: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seed_list: Option<String>,
    /// Extra `key=value` overrides; later ones win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            pairs.extend(assignments(&fs::read_to_string(path)?)?);
        }
        if let Some(p) = &self.preset {
            pairs.push(("preset".into(), p.clone()));
        }
        if let Some(a) = &self.algorithm {
            pairs.push(("algorithm".into(), a.clone()));
        }
        if let Some(s) = &self.seed_list {
            pairs.push(("seeds".into(), s.clone()));
        }
        for o in &self.overrides {
            pairs.extend(assignments(o)?);
        }
        let cfg = apply_assignments(RunConfig::reference(), &pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(reports: &[RunReport], out: Option<&PathBuf>) -> Result<(), Error> {
    match out {
        Some(dir) => {
            for path in render_report(reports, dir)? {
                eprintln!("wrote {}", path.display());
            }
        }
        None => write_csv(reports, io::stdout().lock())?,
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.resolve()?;
            let reports = run_experiment(&cfg).inspect_err(|e| diagnose(e, &cfg))?;
            emit(&reports, out.as_ref())
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = config.resolve()?;
            let values = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::config("values", format!("`{v}` is not a number"))))
                .collect::<Result<Vec<_>, _>>()?;
            let reports = sweep(&cfg, param, &values).inspect_err(|e| diagnose(e, &cfg))?;
            emit(&reports, out.as_ref())
        }
        Command::OracleVerify { instances, seed, log } => {
            let report = run_oracle_suite(&mut stream(seed, Stream::Eval), instances)?;
            let text = report.to_string();
            io::stdout().lock().write_all(text.as_bytes())?;
            if let Some(path) = log {
                fs::write(path, &text)?;
            }
            if report.all_passed() {
                Ok(())
            } else {
                Err(Error::Unsupported("tabular identities violated".into()))
            }
        }
        Command::Render { csv, out } => {
            let reports = read_csv(fs::File::open(csv)?)?;
            render_report(&reports, &out).map(|_| ())
        }
    }
}

fn diagnose(err: &Error, cfg: &RunConfig) {
    if let Error::NonFinite { .. } = err {
        eprintln!("configuration at abort:\n{}", cfg.render());
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
