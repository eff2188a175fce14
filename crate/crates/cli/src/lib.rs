//! Train, evaluate and predict with RMDL ensembles from the command line.

pub mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rmdl_core::data::{load_idx_images, load_mnist_files, load_text_file, DataError, Dataset, Features};
use rmdl_core::features::{tokenize, EmbeddingTable};
use rmdl_core::rmdl::{
    load_checkpoint, mix_seed, save_checkpoint, train_ensemble, write_history_csv, Corpus, Ensemble, Evaluation, ProgressEvent,
    RmdlError,
};
use thiserror::Error;

pub use config::{RunConfig, Source, Task, TestSplit};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("output error: {0}")]
    Output(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint(_) | CliError::Output(_) => 1,
            CliError::Data(_) | CliError::Incompatible(_) => 2,
            CliError::Training(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RmdlError> for CliError {
    fn from(e: RmdlError) -> Self {
        let msg = e.to_string();
        match e {
            RmdlError::Config(_) | RmdlError::Ranges(_) => CliError::Config(msg),
            RmdlError::Checkpoint(_) => CliError::Checkpoint(msg),
            RmdlError::Incompatible(inner) => CliError::Incompatible(inner),
            RmdlError::Data(_) | RmdlError::Feature(_) => CliError::Data(msg),
            _ => CliError::Training(msg),
        }
    }
}

const SPLIT_TAG: u64 = 0x5b1_17;

pub fn load_source(source: &Source) -> Result<Dataset, CliError> {
    Ok(match source {
        Source::Image { images, labels } => load_mnist_files(images, labels)?,
        Source::Text { corpus } => load_text_file(corpus)?,
    })
}

fn narrow(data: Dataset, range: Option<(usize, usize)>, key: &str) -> Result<Dataset, CliError> {
    let Some((a, b)) = range else { return Ok(data) };
    if b > data.len() {
        return Err(CliError::Data(format!("{key} {a}..{b} exceeds the {} items available", data.len())));
    }
    Ok(data.range(a, b)?)
}

/// Training and test sets as described by the config.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let full = load_source(&cfg.train)?;
    match &cfg.test {
        TestSplit::Files(src, range) => {
            let test = narrow(load_source(src)?, *range, "test_range")?;
            Ok((narrow(full, cfg.train_range, "train_range")?, test))
        }
        &TestSplit::Range(a, b) => {
            let test = narrow(full.clone(), Some((a, b)), "test_range")?;
            Ok((narrow(full, cfg.train_range, "train_range")?, test))
        }
        &TestSplit::Fraction(f) => {
            let train = narrow(full, cfg.train_range, "train_range")?;
            Ok(train.split(1.0 - f, mix_seed(cfg.ensemble.seed, SPLIT_TAG))?)
        }
    }
}

/// Trainer count from `RMDL_THREADS`; unset means one per model.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("RMDL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("RMDL_THREADS: {v:?} is not a positive integer"))),
        },
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// `metric=value` lines for an evaluation.
pub fn format_report(ensemble: &Ensemble, eval: &Evaluation) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    line("accuracy", eval.accuracy.to_string());
    line("micro_precision", eval.micro.precision.to_string());
    line("micro_recall", eval.micro.recall.to_string());
    line("micro_f1", eval.micro.f1.to_string());
    line("degenerate", eval.micro.degenerate.to_string());
    line("items", eval.predictions.len().to_string());
    line("models", ensemble.members.len().to_string());
    line("voting_models", eval.member_accuracy.len().to_string());
    for (id, acc) in &eval.member_accuracy {
        let family = ensemble.members[*id].spec.family.name();
        line(&format!("model_{id}_{family}_accuracy"), acc.to_string());
    }
    let mut accs: Vec<f64> = eval.member_accuracy.iter().map(|&(_, a)| a).collect();
    line("median_model_accuracy", median(&mut accs).to_string());
    out
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: String,
    pub checkpoint: PathBuf,
    pub evaluation: Evaluation,
}

/// Trains the configured ensemble, evaluates it on the test split and
/// writes the checkpoint, history and report. Per-epoch progress goes to
/// stderr when `verbose`.
pub fn cmd_train(config_path: &Path, verbose: bool) -> Result<TrainOutcome, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.ensemble.threads = threads_from_env()?;
    let (train, test) = load_splits(&cfg)?;
    let pretrained = match (&cfg.glove, cfg.task) {
        (Some(path), Task::Text) => {
            let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let table = EmbeddingTable::load(BufReader::new(file))
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            cfg.ensemble.embedding_dim = table.dim();
            Some(table)
        }
        _ => None,
    };
    let corpus = Corpus::fit(&train, cfg.text)?;

    let (tx, rx) = mpsc::channel::<ProgressEvent>();
    let printer = std::thread::spawn(move || {
        for ev in rx {
            if !verbose {
                continue;
            }
            if ev.failed {
                eprintln!("model {} ({}) failed at epoch {}", ev.model_id, ev.family.name(), ev.epoch);
            } else {
                eprintln!(
                    "model {} ({}) epoch {}/{} loss={:.4} accuracy={:.4}",
                    ev.model_id,
                    ev.family.name(),
                    ev.epoch,
                    ev.epochs,
                    ev.loss,
                    ev.accuracy
                );
            }
        }
    });
    let trained = train_ensemble(&cfg.ensemble, &corpus, pretrained.as_ref(), Some(tx));
    printer.join().expect("progress printer does not panic");
    let ensemble = trained?;

    let labels = ensemble.align_labels(&test)?;
    let features = ensemble.features(&test)?;
    let evaluation = ensemble.evaluate(&features, &labels)?;
    let report = format_report(&ensemble, &evaluation);

    let ckpt = &cfg.outputs.checkpoint;
    write_file(ckpt, |w| {
        save_checkpoint(&ensemble, w).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
    })?;
    if let Some(path) = &cfg.outputs.history {
        write_file(path, |w| write_history_csv(&ensemble.history, w))?;
    }
    if let Some(path) = &cfg.outputs.report {
        write_file(path, |w| w.write_all(report.as_bytes()))?;
    }
    Ok(TrainOutcome {
        report,
        checkpoint: ckpt.clone(),
        evaluation,
    })
}

pub fn open_checkpoint(path: &Path) -> Result<Ensemble, CliError> {
    let file = File::open(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    load_checkpoint(BufReader::new(file)).map_err(|e| match e {
        RmdlError::Checkpoint(_) => CliError::Checkpoint(format!("{}: {e}", path.display())),
        other => CliError::Checkpoint(format!("{}: {other}", path.display())),
    })
}

/// Report lines for `checkpoint` scored on a labelled dataset.
pub fn cmd_eval(checkpoint: &Path, data: &Source, range: Option<(usize, usize)>) -> Result<String, CliError> {
    let ensemble = open_checkpoint(checkpoint)?;
    let dataset = narrow(load_source(data)?, range, "range")?;
    let labels = ensemble.align_labels(&dataset)?;
    let features = ensemble.features(&dataset)?;
    let eval = ensemble.evaluate(&features, &labels)?;
    Ok(format_report(&ensemble, &eval))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictInput {
    /// An IDX image file, labels not needed.
    Images(PathBuf),
    /// One document per line; anything before a tab is ignored, so labelled
    /// corpora work too.
    Text(PathBuf),
}

/// Predicted class names, one per input image or line.
pub fn cmd_predict(checkpoint: &Path, input: &PredictInput) -> Result<Vec<String>, CliError> {
    let ensemble = open_checkpoint(checkpoint)?;
    let io = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
    let features = match input {
        PredictInput::Images(path) => {
            let file = File::open(path).map_err(|e| io(path, e))?;
            Features::Image(load_idx_images(BufReader::new(file))?)
        }
        PredictInput::Text(path) => {
            let file = File::open(path).map_err(|e| io(path, e))?;
            let docs = BufReader::new(file)
                .lines()
                .map(|l| {
                    let l = l.map_err(|e| io(path, e))?;
                    let text = l.split_once('\t').map_or(l.as_str(), |(_, t)| t);
                    Ok(tokenize(text))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            if docs.is_empty() {
                return Err(CliError::Data(format!("{}: no documents", path.display())));
            }
            Features::Text(docs)
        }
    };
    let features = ensemble.preprocessor.transform_features(&features)?;
    let labels = ensemble.predict(&features)?;
    Ok(labels.into_iter().map(|l| ensemble.classes[l].clone()).collect())
}
