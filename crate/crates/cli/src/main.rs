use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vtdis_cli::{load_config, run, Command};

/// Variance-tuned diffusion importance sampling runs.
#[derive(Debug, Parser)]
#[command(name = "vtdis", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Draw a training set from the target.
    GenData,
    /// Fit a denoiser by score matching.
    TrainScore,
    /// Tune per-step covariances.
    Tune,
    /// Draw weighted samples.
    Sample,
    /// ESS, ELBO/EUBO, histograms and eta profiles over an NFE sweep.
    Eval,
    /// Probability-flow ODE importance sampling.
    OdeBaseline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::TrainScore => Command::TrainScore,
        Cmd::Tune => Command::Tune,
        Cmd::Sample => Command::Sample,
        Cmd::Eval => Command::Eval,
        Cmd::OdeBaseline => Command::OdeBaseline,
    };
    let outcome = load_config(cli.config.as_deref(), cli.seed, cli.out.as_deref(), &cli.overrides).and_then(|cfg| run(cmd, &cfg));
    match outcome {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
