//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Relative paths are resolved against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rmdl_core::features::TextOptions;
use rmdl_core::optim::OptimizerKind;
use rmdl_core::rmdl::{CellKind, EnsembleConfig, SamplingRanges, Span, VoteMode};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Image,
    Text,
}

/// Where a dataset comes from, optionally narrowed to items `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Image { images: PathBuf, labels: PathBuf },
    Text { corpus: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestSplit {
    /// A separate file, optionally restricted to a range.
    Files(Source, Option<(usize, usize)>),
    /// A range of the training file; the training range should not overlap it.
    Range(usize, usize),
    /// A seeded random fraction held out of the training data.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub checkpoint: PathBuf,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train: Source,
    pub train_range: Option<(usize, usize)>,
    pub test: TestSplit,
    pub ensemble: EnsembleConfig,
    pub text: TextOptions,
    /// Pretrained word vectors for the embedding layers of text models.
    pub glove: Option<PathBuf>,
    pub outputs: Outputs,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["task", "seed"]),
    (
        "data",
        &[
            "train_images",
            "train_labels",
            "test_images",
            "test_labels",
            "train_corpus",
            "test_corpus",
            "train_range",
            "test_range",
            "test_fraction",
        ],
    ),
    ("ensemble", &["dnn", "cnn", "rnn", "epochs", "batch_size", "vote", "embedding_dim"]),
    (
        "ranges",
        &[
            "dnn_layers",
            "dnn_units",
            "cnn_blocks",
            "cnn_kernels",
            "cnn_filters",
            "rnn_layers",
            "rnn_units",
            "cells",
            "max_dropout",
            "optimizers",
        ],
    ),
    ("text", &["ngram_max", "max_vocab", "max_len", "glove"]),
    ("output", &["checkpoint", "history", "report"]),
];

/// Parsed `section.key -> value` pairs.
struct Raw {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

fn config_err(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut section = String::new();
    let mut values = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("line {}: unclosed section header", i + 1)))?
                .trim();
            if !KNOWN.iter().any(|(s, _)| *s == name) {
                return Err(CliError::Config(format!("line {}: unknown section [{name}]", i + 1)));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let allowed = KNOWN.iter().find(|(s, _)| *s == section).map_or(&[][..], |(_, k)| k);
        if !allowed.contains(&key) {
            return Err(config_err(&full, "unknown key"));
        }
        if values.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(config_err(&full, "set twice"));
        }
    }
    Ok(values)
}

impl Raw {
    fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .map(|v| v.parse::<T>().map_err(|e| config_err(key, format!("{v:?}: {e}"))))
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.str(key).map(|v| self.base.join(v))
    }

    fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| config_err(key, "missing"))
    }

    /// `a..b` as a half-open item range.
    fn range(&self, key: &str) -> Result<Option<(usize, usize)>, CliError> {
        let Some(v) = self.str(key) else { return Ok(None) };
        let bad = || config_err(key, format!("{v:?} is not start..end"));
        let (a, b) = v.split_once("..").ok_or_else(bad)?;
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        Ok(Some((a, b)))
    }

    /// `min..max`, inclusive, or a single value.
    fn span(&self, key: &str, default: Span) -> Result<Span, CliError> {
        let Some(v) = self.str(key) else { return Ok(default) };
        let bad = || config_err(key, format!("{v:?} is not min..max"));
        let (a, b) = v.split_once("..").unwrap_or((v, v));
        Ok(Span::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    fn list<T>(&self, key: &str, default: Vec<T>, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
        let Some(v) = self.str(key) else { return Ok(default) };
        v.split(',')
            .map(|s| item(s.trim()).ok_or_else(|| config_err(key, format!("bad entry {:?}", s.trim()))))
            .collect()
    }
}

fn source(raw: &Raw, prefix: &str, task: Task) -> Result<Option<Source>, CliError> {
    Ok(match task {
        Task::Image => {
            let (ik, lk) = (format!("data.{prefix}_images"), format!("data.{prefix}_labels"));
            match (raw.path(&ik), raw.path(&lk)) {
                (Some(images), Some(labels)) => Some(Source::Image { images, labels }),
                (None, None) => None,
                (None, Some(_)) => return Err(config_err(&ik, "missing")),
                (Some(_), None) => return Err(config_err(&lk, "missing")),
            }
        }
        Task::Text => raw.path(&format!("data.{prefix}_corpus")).map(|corpus| Source::Text { corpus }),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw = Raw {
            values: parse_lines(text)?,
            base: base.to_path_buf(),
        };
        let task = match raw.str("task") {
            Some("image") => Task::Image,
            Some("text") => Task::Text,
            Some(other) => return Err(config_err("task", format!("{other:?} is not image or text"))),
            None => return Err(config_err("task", "missing")),
        };
        let train = source(&raw, "train", task)?.ok_or_else(|| {
            config_err(
                if task == Task::Image { "data.train_images" } else { "data.train_corpus" },
                "missing",
            )
        })?;
        let train_range = raw.range("data.train_range")?;
        let test_range = raw.range("data.test_range")?;
        let fraction: Option<f64> = raw.parse("data.test_fraction")?;
        let test = match (source(&raw, "test", task)?, test_range, fraction) {
            (Some(_), _, Some(_)) | (None, Some(_), Some(_)) => {
                return Err(config_err("data.test_fraction", "conflicts with a test file or test_range"))
            }
            (Some(src), range, None) => TestSplit::Files(src, range),
            (None, Some((a, b)), None) => TestSplit::Range(a, b),
            (None, None, f) => {
                let f = f.unwrap_or(0.2);
                if !(f > 0.0 && f < 1.0) {
                    return Err(config_err("data.test_fraction", format!("{f} outside (0, 1)")));
                }
                TestSplit::Fraction(f)
            }
        };

        let d = EnsembleConfig::default();
        let r = SamplingRanges::default();
        let ranges = SamplingRanges {
            dnn_layers: raw.span("ranges.dnn_layers", r.dnn_layers)?,
            dnn_units: raw.span("ranges.dnn_units", r.dnn_units)?,
            cnn_blocks: raw.span("ranges.cnn_blocks", r.cnn_blocks)?,
            cnn_kernels: raw.list("ranges.cnn_kernels", r.cnn_kernels, |s| s.parse().ok())?,
            cnn_filters: raw.span("ranges.cnn_filters", r.cnn_filters)?,
            rnn_layers: raw.span("ranges.rnn_layers", r.rnn_layers)?,
            rnn_units: raw.span("ranges.rnn_units", r.rnn_units)?,
            cells: raw.list("ranges.cells", r.cells, |s| match s {
                "lstm" => Some(CellKind::Lstm),
                "gru" => Some(CellKind::Gru),
                _ => None,
            })?,
            max_dropout: raw.parse("ranges.max_dropout")?.unwrap_or(r.max_dropout),
            optimizers: raw.list("ranges.optimizers", r.optimizers, OptimizerKind::parse)?,
        };
        let vote = match raw.str("ensemble.vote") {
            None => d.vote,
            Some(v) => VoteMode::parse(v).ok_or_else(|| config_err("ensemble.vote", format!("unknown mode {v:?}")))?,
        };
        let ensemble = EnsembleConfig {
            dnn: raw.parse("ensemble.dnn")?.unwrap_or(d.dnn),
            cnn: raw.parse("ensemble.cnn")?.unwrap_or(d.cnn),
            rnn: raw.parse("ensemble.rnn")?.unwrap_or(d.rnn),
            seed: raw.parse("seed")?.unwrap_or(d.seed),
            ranges,
            epochs: raw.parse("ensemble.epochs")?.unwrap_or(d.epochs),
            batch_size: raw.parse("ensemble.batch_size")?.unwrap_or(d.batch_size),
            vote,
            embedding_dim: raw.parse("ensemble.embedding_dim")?.unwrap_or(d.embedding_dim),
            threads: None,
        };
        if ensemble.models() == 0 {
            return Err(config_err("ensemble.dnn", "dnn + cnn + rnn must be at least 1"));
        }
        for (key, v) in [
            ("ensemble.epochs", ensemble.epochs),
            ("ensemble.batch_size", ensemble.batch_size),
            ("ensemble.embedding_dim", ensemble.embedding_dim),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        ensemble
            .ranges
            .validate()
            .map_err(|e| CliError::Config(format!("ranges: {e}")))?;

        let t = TextOptions::default();
        let text = TextOptions {
            ngram_max: raw.parse("text.ngram_max")?.unwrap_or(t.ngram_max),
            max_vocab: match raw.str("text.max_vocab") {
                None => t.max_vocab,
                Some("all") => None,
                Some(_) => raw.parse("text.max_vocab")?,
            },
            max_len: raw.parse("text.max_len")?.unwrap_or(t.max_len),
        };
        if text.ngram_max == 0 || text.max_len == 0 || text.max_vocab == Some(0) {
            return Err(config_err("text", "ngram_max, max_len and max_vocab must be positive"));
        }
        let outputs = Outputs {
            checkpoint: raw.require_path("output.checkpoint")?,
            history: raw.path("output.history"),
            report: raw.path("output.report"),
        };
        Ok(RunConfig {
            task,
            train,
            train_range,
            test,
            ensemble,
            text,
            glove: raw.path("text.glove"),
            outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "task = image\nseed = 7\n[data]\ntrain_images = a.gz\ntrain_labels = b.gz\ntrain_range = 0..600\ntest_range = 600..700\n[output]\ncheckpoint = out/m.rmdl\n";

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    fn message(e: CliError) -> String {
        match e {
            CliError::Config(m) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_image_config() {
        let c = parse(BASIC).unwrap();
        assert_eq!(c.task, Task::Image);
        assert_eq!(c.ensemble.seed, 7);
        assert_eq!(c.train_range, Some((0, 600)));
        assert_eq!(c.test, TestSplit::Range(600, 700));
        assert_eq!(c.outputs.checkpoint, Path::new("/cfg/out/m.rmdl"));
        assert_eq!(c.ensemble.models(), 9);
        assert_eq!(c.ensemble.ranges, SamplingRanges::default());
    }

    #[test]
    fn ranges_and_lists() {
        let text = format!(
            "{BASIC}[ranges]\ndnn_units = 8..16\ncnn_kernels = 3\ncells = gru\noptimizers = sgd, adam # trailing\n[ensemble]\nvote = plurality\ndnn = 2\n"
        );
        let c = parse(&text).unwrap();
        assert_eq!(c.ensemble.ranges.dnn_units, Span::new(8, 16));
        assert_eq!(c.ensemble.ranges.cnn_kernels, [3]);
        assert_eq!(c.ensemble.ranges.cells, [CellKind::Gru]);
        assert_eq!(c.ensemble.ranges.optimizers, [OptimizerKind::Sgd, OptimizerKind::Adam]);
        assert_eq!(c.ensemble.vote, VoteMode::Plurality);
        assert_eq!(c.ensemble.dnn, 2);
    }

    #[test]
    fn errors_name_the_key() {
        assert!(message(parse(&BASIC.replace("seed = 7", "seed = x")).unwrap_err()).contains("seed"));
        assert!(message(parse(&format!("{BASIC}[ensemble]\nepochs = 0\n")).unwrap_err()).contains("ensemble.epochs"));
        assert!(message(parse(&format!("{BASIC}[ensemble]\nlayers = 2\n")).unwrap_err()).contains("ensemble.layers"));
        assert!(message(parse(&BASIC.replace("task = image", "")).unwrap_err()).contains("task"));
        assert!(message(parse(&BASIC.replace("train_labels = b.gz\n", "")).unwrap_err()).contains("data.train_labels"));
        assert!(message(parse(&format!("{BASIC}[ranges]\ncells = rnn\n")).unwrap_err()).contains("ranges.cells"));
        assert!(message(parse(&format!("{BASIC}[ensemble]\ndnn = 0\ncnn = 0\nrnn = 0\n")).unwrap_err()).contains("dnn"));
    }

    #[test]
    fn text_defaults_to_fraction_split() {
        let c = parse("task = text\n[data]\ntrain_corpus = n.tsv\n[text]\nmax_vocab = all\n[output]\ncheckpoint = m\n").unwrap();
        assert_eq!(c.test, TestSplit::Fraction(0.2));
        assert_eq!(c.text.max_vocab, None);
        assert_eq!(c.train, Source::Text { corpus: "/cfg/n.tsv".into() });
    }

    #[test]
    fn missing_file_mentions_path() {
        let msg = message(RunConfig::load(Path::new("/nonexistent/run.cfg")).unwrap_err());
        assert!(msg.contains("/nonexistent/run.cfg"));
    }
}
