use clap::{Args, Parser, Subcommand};
use flagflow::experiment::{exit_code_for, run_experiment, ExperimentConfig, ExperimentKind, RunOptions, Summary};
use flagflow::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "flagflow", version, about = "Matrix diffusions on complex flag manifolds: simulation and verification runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write `summary.json` (and `paths.csv`).
    Run(RunArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    /// JSON file with the experiment configuration.
    #[arg(long, conflicts_with_all = ["experiment", "m", "k", "horizon", "dt", "paths", "seed", "u"])]
    config: Option<PathBuf>,
    /// Experiment kind, e.g. `cauchy-limit`.
    #[arg(long, required_unless_present = "config")]
    experiment: Option<String>,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Time horizon.
    #[arg(long = "T", id = "horizon", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Number of independent paths.
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated real vector (martingale frequencies or Jacobi index).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    u: Option<Vec<f64>>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record every N-th step (overrides the config file; default 100).
    #[arg(long)]
    thin: Option<usize>,
    /// Write only `summary.json`.
    #[arg(long)]
    json_only: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match (&self.config, &self.experiment) {
            (Some(path), _) => ExperimentConfig::from_json_file(path)?,
            (None, Some(name)) => {
                let kind: ExperimentKind = name.parse()?;
                let mut c = ExperimentConfig::new(kind, self.m, self.k, self.horizon, self.dt, self.paths, self.seed);
                c.u.clone_from(&self.u);
                c
            }
            (None, None) => return Err(Error::ConfigInvalid("either --config or --experiment is required".into())),
        };
        if let Some(out) = &self.out {
            config.output_dir.clone_from(out);
        }
        if let Some(thin) = self.thin {
            config.thin = thin;
        }
        Ok(config)
    }
}

fn report(summary: &Summary) {
    for v in &summary.verdicts {
        let mark = if v.pass { "PASS" } else { "FAIL" };
        println!("{mark} {:<34} {:>14.6e}  [{:.4e}, {:.4e}]", v.name, v.value, v.lower, v.upper);
    }
    println!("flagged paths: {} of {}", summary.flagged_count, summary.n_paths);
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;
    let outcome = args.config().and_then(|config| {
        let summary = run_experiment(&config, &RunOptions { write_paths: !args.json_only, dry: false })?;
        println!("{} -> {}", config.experiment.name(), config.output_dir.display());
        Ok(summary)
    });
    match outcome {
        Ok(summary) => {
            report(&summary);
            ExitCode::from(summary.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
