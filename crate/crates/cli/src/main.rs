use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ftanet_cli::{
    cmd_cfp, cmd_evaluate, cmd_extract, cmd_synth, cmd_train, CliError, RunConfig, EXIT_BAD_INPUT,
    EXIT_INTERNAL,
};

/// Singing melody extraction: features, training, inference, evaluation.
#[derive(Parser)]
#[command(name = "ftanet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a melody contour from a WAV file with a trained model.
    Extract {
        wav: PathBuf,
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Output contour path (two-column time/frequency text).
        #[arg(long)]
        out: PathBuf,
        /// Optional PNG heatmap of the salience map.
        #[arg(long)]
        salience: Option<PathBuf>,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a manifest of WAV + annotation pairs.
    Train {
        manifest: PathBuf,
        /// Output model path.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Loss-history CSV path (default: <out>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score an estimated contour against a reference annotation.
    Evaluate {
        reference: PathBuf,
        estimate: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a JSON spec.
    Synth {
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute CFP features for a WAV and save them to a binary file.
    Cfp {
        wav: PathBuf,
        /// Output feature file.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract { wav, model, out, salience, config } => {
            let cfg = RunConfig::load(config.as_deref(), None)?;
            cmd_extract(&wav, &model, &out, salience.as_deref(), &cfg)
        }
        Command::Train { manifest, out, config, seed, loss_csv } => {
            let cfg = RunConfig::load(config.as_deref(), seed)?;
            cmd_train(&manifest, &cfg, &out, loss_csv.as_deref())
        }
        Command::Evaluate { reference, estimate, out } => {
            cmd_evaluate(&reference, &estimate, out.as_deref()).map(|_| ())
        }
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Cfp { wav, out, config } => {
            let cfg = RunConfig::load(config.as_deref(), None)?;
            cmd_cfp(&wav, &out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.exit_code() {
                EXIT_BAD_INPUT => EXIT_BAD_INPUT as u8,
                EXIT_INTERNAL => EXIT_INTERNAL as u8,
                other => other as u8,
            })
        }
    }
}
