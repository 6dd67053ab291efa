use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robustlearn::bench::{self, ExperimentConfig, OUT_DIR_ENV};
use robustlearn::theory::{run_verification_suite, SuiteConfig};

#[derive(Parser)]
#[command(
    name = "robustlearn",
    version,
    about = "Train smoothness-regularized softmax classifiers and certify the theory behind the regularizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single training run (the configured method, first seed)
    Train {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Output directory (overrides ROBUSTLEARN_OUT_DIR)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Multi-method, multi-seed sweep with per-epoch CSV metrics
    Bench {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the numerical verification suite; nonzero exit on any failed check
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per check
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Monte-Carlo samples for the second-order check
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        /// Perturbation scale for the chain and second-order checks
        #[arg(long, default_value_t = 1e-3)]
        c: f64,
        /// Also write the report to this file
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train with targeted adversarial training and dump per-epoch error tallies
    Confusion {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> robustlearn::Result<ExitCode> {
    match cli.command {
        Command::Train { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_out_dir(out_dir);
            let summary = bench::run_single(&cfg, &out)?;
            print!("{}", summary.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_out_dir(out_dir);
            let summary = bench::run_experiment(&cfg, &out)?;
            print!("{}", summary.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            seed,
            instances,
            samples,
            c,
            report,
        } => {
            let config = SuiteConfig {
                seed,
                instances,
                samples,
                c,
            };
            let suite = run_verification_suite(&config)?;
            let text = suite.render();
            if let Some(path) = report {
                std::fs::write(&path, &text)
                    .map_err(|e| robustlearn::Error::io(path.display().to_string(), e))?;
            }
            print!("{text}");
            if suite.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Confusion { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_out_dir(out_dir);
            let path = bench::run_confusion(&cfg, &out)?;
            println!("confusion matrices -> {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}
