use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use photon_cli::config::RawConfig;
use photon_cli::{cmd_bench, cmd_eval, cmd_generate, cmd_ingest, cmd_params, cmd_train, CliError};

#[derive(Parser)]
#[command(
    name = "photon",
    version,
    about = "Hierarchical autoregressive language model with an instrumented KV-traffic ledger"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.lr=0.001 (repeatable; wins over
    /// the file).
    #[arg(short = 's', long = "set")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RawConfig, CliError> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::from_file(path)?,
            None => RawConfig::default(),
        };
        raw.apply_overrides(&self.set)?;
        Ok(raw)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize raw byte files into a corpus.
    Ingest {
        /// Input files (one document each).
        inputs: Vec<PathBuf>,
        /// Output corpus path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write manifest, metrics, and checkpoints.
    Train(ConfigArgs),
    /// Score a held-out corpus with a checkpoint.
    Eval(ConfigArgs),
    /// Generate text from a checkpoint.
    Generate(ConfigArgs),
    /// Audit preset parameter counts against their published breakdowns.
    Params {
        /// vanilla-600m | vanilla-1.2b | photon-600m | photon-1.2b | all
        preset: Option<String>,
    },
    /// Run prefill-heavy and decode-heavy KV-traffic benches.
    Bench(ConfigArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Ingest { inputs, out } => {
            println!("{}", cmd_ingest(&inputs, &out)?);
        }
        Cmd::Train(args) => {
            println!("{}", cmd_train(&args.resolve()?)?);
        }
        Cmd::Eval(args) => {
            println!("{}", cmd_eval(&args.resolve()?)?);
        }
        Cmd::Generate(args) => {
            let bytes = cmd_generate(&args.resolve()?)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&bytes).map_err(CliError::Io)?;
            stdout.write_all(b"\n").map_err(CliError::Io)?;
        }
        Cmd::Params { preset } => {
            print!("{}", cmd_params(preset.as_deref())?);
        }
        Cmd::Bench(args) => {
            print!("{}", cmd_bench(&args.resolve()?)?.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
