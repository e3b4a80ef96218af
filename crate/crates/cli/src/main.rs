use clap::{Parser, Subcommand};
use randflight_cli::{commands, CliError, Command, Invocation};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "randflight", version, about = "Random flights in channels with microstructured walls")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Experiment configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Validation profile: quick, standard or full.
    #[arg(long, global = true)]
    profile: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Discretized spectrum and spectral diffusivity.
    Spectrum,
    /// Monte Carlo diffusivity along the scaling schedule.
    Simulate,
    /// Mean exit times from finite channels.
    ExitTime,
    /// Lagged displacement correlations and the shallow-angle ratio.
    Correlations,
    /// Invariant suite with junit-style XML output.
    Validate,
    /// Closed-form diffusivity tables.
    Tables,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Spectrum => Command::Spectrum,
        Sub::Simulate => Command::Simulate,
        Sub::ExitTime => Command::ExitTime,
        Sub::Correlations => Command::Correlations,
        Sub::Validate => Command::Validate,
        Sub::Tables => Command::Tables,
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("{}", CliError::Config("--workers must be positive".into()));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("{}", CliError::Numeric(e.to_string()));
            return ExitCode::from(3);
        }
    }
    let inv = Invocation { command, config: cli.config, seed: cli.seed, out_dir: cli.out_dir, profile: cli.profile };
    match randflight_cli::run(&inv) {
        Ok(out) => {
            println!("{}", out.summary);
            println!("wrote {}", commands::describe(&out.files));
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
