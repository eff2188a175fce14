use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmdl_cli::{cmd_eval, cmd_predict, cmd_train, CliError, PredictInput, Source};

#[derive(Parser)]
#[command(name = "rmdl", version, about = "Random multimodel deep learning ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = true)]
struct DataArgs {
    /// IDX image file (plain or gzipped)
    #[arg(long, requires = "labels", conflicts_with = "corpus")]
    images: Option<PathBuf>,
    /// IDX label file matching --images
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Tab-separated `label<TAB>text` corpus
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble from a config file
    Train {
        config: PathBuf,
        /// Suppress per-epoch progress on stderr
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a checkpoint on a labelled dataset
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Only items start..end
        #[arg(long)]
        range: Option<String>,
    },
    /// Print one predicted label per input
    Predict {
        checkpoint: PathBuf,
        /// IDX image file
        #[arg(long, conflicts_with = "text")]
        images: Option<PathBuf>,
        /// Text file with one document per line
        #[arg(long, required_unless_present = "images")]
        text: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("--range: {s:?} is not start..end"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok((a, b))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, quiet } => {
            let out = cmd_train(&config, !quiet)?;
            print!("{}", out.report);
        }
        Command::Eval { checkpoint, data, range } => {
            let source = match (data.images, data.labels, data.corpus) {
                (Some(images), Some(labels), None) => Source::Image { images, labels },
                (None, None, Some(corpus)) => Source::Text { corpus },
                _ => return Err(CliError::Config("give --images with --labels, or --corpus".into())),
            };
            let range = range.as_deref().map(parse_range).transpose()?;
            print!("{}", cmd_eval(&checkpoint, &source, range)?);
        }
        Command::Predict { checkpoint, images, text } => {
            let input = match (images, text) {
                (Some(p), _) => PredictInput::Images(p),
                (None, Some(p)) => PredictInput::Text(p),
                (None, None) => return Err(CliError::Config("give --images or --text".into())),
            };
            for label in cmd_predict(&checkpoint, &input)? {
                println!("{label}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rmdl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
