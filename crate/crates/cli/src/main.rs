use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use ucos_cli::{run_pipeline, Command, Config, Overrides, PipelineError};

/// Diffusion posterior sampling for diffuse optical tomography.
#[derive(Debug, Parser)]
#[command(name = "ucos-dot", version)]
struct Cli {
    /// TOML configuration; every field defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Working directory for all artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate the phantom training dataset.
    GenData,
    /// Assemble and export the Jacobians and simulate the target data.
    BuildOperator,
    /// Train the conditional (ucos) or unconditional score network.
    Train {
        #[arg(long, value_parser = ["ucos", "unconditional"])]
        mode: Option<String>,
    },
    /// Draw a posterior sample ensemble.
    Sample {
        #[arg(long, value_parser = ["ucos", "ucos-reg", "dps", "gaussian"])]
        method: Option<String>,
        /// Weight of the Gaussian score for ucos-reg.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Pixelwise mean, std and bias of one or more ensembles.
    Stats {
        #[arg(long = "ensemble", required = true)]
        ensembles: Vec<PathBuf>,
        /// Dataset file whose first field is the ground truth.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Export in physical units (mm⁻¹) instead of the rescaled field.
        #[arg(long)]
        physical: bool,
    },
    /// Run the built-in consistency checks.
    Verify,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut overrides = Overrides {
        seed: cli.seed,
        ..Overrides::default()
    };
    let command = match cli.command {
        Sub::GenData => Command::GenData,
        Sub::BuildOperator => Command::BuildOperator,
        Sub::Train { mode } => {
            overrides.training_mode = mode;
            Command::Train
        }
        Sub::Sample {
            method,
            alpha,
            samples,
        } => {
            overrides.method = method;
            overrides.alpha = alpha;
            overrides.samples = samples;
            Command::Sample
        }
        Sub::Stats {
            ensembles,
            truth,
            physical,
        } => Command::Stats {
            ensembles,
            truth,
            physical,
        },
        Sub::Verify => Command::Verify,
    };
    let cfg = base.with_overrides(&overrides)?;
    let outcome = run_pipeline(&command, &cfg, &cli.out)
        .with_context(|| format!("{} failed", command.name()))?;
    println!("{}", outcome.summary.trim_end());
    for a in &outcome.artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<PipelineError>())
                .map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
