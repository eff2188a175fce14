use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{sample_architecture, ArchitectureSpec, Family, InputDescriptor, SamplingRanges};
use super::vote::VoteMode;
use super::{mix_seed, Result, RmdlError};
use crate::data::{batches, Dataset, Features};
use crate::features::{EmbeddingTable, FeatureSet, TextOptions, TextPreprocessor};
use crate::metrics::{accuracy, confusion, micro_scores, MicroScores};
use crate::nn::{loss_ce, Embedding, LayerKind, Mode, Network, NnError};
use crate::optim::{OptimError, Optimizer};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub dnn: usize,
    pub cnn: usize,
    pub rnn: usize,
    pub seed: u64,
    pub ranges: SamplingRanges,
    pub epochs: usize,
    pub batch_size: usize,
    pub vote: VoteMode,
    /// Token embedding width for text CNN/RNN models.
    pub embedding_dim: usize,
    /// Cap on concurrently trained models; results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            dnn: 3,
            cnn: 3,
            rnn: 3,
            seed: 0,
            ranges: SamplingRanges::default(),
            epochs: 10,
            batch_size: 128,
            vote: VoteMode::Auto,
            embedding_dim: 50,
            threads: None,
        }
    }
}

impl EnsembleConfig {
    pub fn models(&self) -> usize {
        self.dnn + self.cnn + self.rnn
    }

    /// Family of each model index: DNNs first, then CNNs, then RNNs.
    pub fn families(&self) -> Vec<Family> {
        let mut out = vec![Family::Dnn; self.dnn];
        out.extend(vec![Family::Cnn; self.cnn]);
        out.extend(vec![Family::Rnn; self.rnn]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.models() == 0 {
            return Err(RmdlError::Config("the ensemble needs at least one model".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.embedding_dim == 0 {
            return Err(RmdlError::Config("epochs, batch_size and embedding_dim must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(RmdlError::Config("threads must be positive".into()));
        }
        self.ranges.validate()
    }
}

/// Fitted mapping from raw datasets to model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessor {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Text(TextPreprocessor),
}

impl Preprocessor {
    pub fn fit(dataset: &Dataset, text: TextOptions) -> Result<Self> {
        Ok(match &dataset.features {
            Features::Image(t) => {
                let &[_, height, width, channels] = t.shape() else {
                    return Err(RmdlError::Incompatible(format!("image tensor shape {:?}", t.shape())));
                };
                Preprocessor::Image {
                    height,
                    width,
                    channels,
                }
            }
            Features::Text(docs) => Preprocessor::Text(TextPreprocessor::fit(docs, text)?),
        })
    }

    pub fn descriptor(&self) -> InputDescriptor {
        match self {
            &Preprocessor::Image {
                height,
                width,
                channels,
            } => InputDescriptor::Image {
                height,
                width,
                channels,
            },
            Preprocessor::Text(t) => InputDescriptor::Text {
                tfidf_dim: t.tfidf.num_terms(),
                vocab: t.tokens.index_len(),
                max_len: t.options.max_len,
            },
        }
    }

    pub fn transform(&self, dataset: &Dataset) -> Result<FeatureSet> {
        self.transform_features(&dataset.features)
    }

    pub fn transform_features(&self, features: &Features) -> Result<FeatureSet> {
        match (self, features) {
            (
                &Preprocessor::Image {
                    height,
                    width,
                    channels,
                },
                Features::Image(t),
            ) => {
                if t.shape()[1..] != [height, width, channels] {
                    return Err(RmdlError::Incompatible(format!(
                        "images are {:?}, models expect {height}×{width}×{channels}",
                        &t.shape()[1..]
                    )));
                }
                Ok(FeatureSet::Image { images: t.clone() })
            }
            (Preprocessor::Text(p), Features::Text(docs)) => Ok(p.transform(docs)?),
            _ => Err(RmdlError::Incompatible("dataset modality differs from the models'".into())),
        }
    }
}

/// A dataset turned into model inputs by a fitted preprocessor.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub preprocessor: Preprocessor,
    pub features: FeatureSet,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl Corpus {
    pub fn fit(dataset: &Dataset, text: TextOptions) -> Result<Self> {
        let preprocessor = Preprocessor::fit(dataset, text)?;
        let features = preprocessor.transform(dataset)?;
        Ok(Corpus {
            preprocessor,
            features,
            labels: dataset.labels.clone(),
            classes: dataset.classes.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub id: usize,
    pub spec: ArchitectureSpec,
    pub network: Network,
    pub optimizer: Optimizer,
    /// Training diverged; the model takes no part in voting.
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub model_id: usize,
    pub family: Family,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressEvent {
    pub model_id: usize,
    pub family: Family,
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub preprocessor: Preprocessor,
    pub classes: Vec<String>,
    pub members: Vec<Member>,
    pub history: Vec<EpochRecord>,
}

/// Scores of an ensemble on a labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub micro: MicroScores,
    /// Accuracy of each voting member, in member order.
    pub member_accuracy: Vec<(usize, f64)>,
    pub predictions: Vec<usize>,
}

const TRAIN_SALT: u64 = 0x7e57_7a1e;
const PREDICT_CHUNK: usize = 256;

fn train_member(
    id: usize,
    spec: ArchitectureSpec,
    corpus: &Corpus,
    config: &EnsembleConfig,
    pretrained: Option<&EmbeddingTable>,
    progress: Option<&Sender<ProgressEvent>>,
) -> Result<(Member, Vec<EpochRecord>)> {
    let mut network = spec.build()?;
    if let (Some(table), Preprocessor::Text(text)) = (pretrained, &corpus.preprocessor) {
        if let Some(first) = network.layers_mut().first_mut().filter(|l| l.kind() == LayerKind::Embedding) {
            *first = Embedding::from_table(table.matrix_for(&text.tokens)?)?.into();
        }
    }
    let mut optimizer = Optimizer::new(spec.optimizer, spec.hyper())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, TRAIN_SALT));
    let view = spec.view();
    let n = corpus.labels.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut failed = false;

    'epochs: for epoch in 1..=config.epochs {
        let order_seed = rng.next_u64();
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for idx in batches(n, config.batch_size, order_seed, true)? {
            let x = corpus.features.batch(view, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| corpus.labels[i]).collect();
            let (logits, states) = network.forward(&x, Mode::Train, &mut rng)?;
            let (loss, grad) = match loss_ce(&logits, &y) {
                Ok(v) => v,
                Err(NnError::NonFiniteLoss) => {
                    failed = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let k = spec.classes;
            hits += logits
                .data()
                .chunks_exact(k)
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
            loss_sum += loss * y.len() as f64;
            network.backward(&grad, states, false)?;
            match optimizer.step(network.params_and_grads()) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient { .. }) => {
                    failed = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let record = EpochRecord {
            epoch,
            model_id: id,
            family: spec.family,
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
        };
        history.push(record);
        if let Some(tx) = progress {
            // a closed receiver only means nobody is listening
            let _ = tx.send(ProgressEvent {
                model_id: id,
                family: spec.family,
                epoch,
                epochs: config.epochs,
                loss: record.loss,
                accuracy: record.accuracy,
                failed: false,
            });
        }
    }
    if failed {
        if let Some(tx) = progress {
            let _ = tx.send(ProgressEvent {
                model_id: id,
                family: spec.family,
                epoch: history.len() + 1,
                epochs: config.epochs,
                loss: f64::NAN,
                accuracy: f64::NAN,
                failed: true,
            });
        }
    }
    Ok((
        Member {
            id,
            spec,
            network,
            optimizer,
            failed,
        },
        history,
    ))
}

/// Samples and trains `config.models()` models, each with its own seed,
/// optimizer and data order. Models run concurrently on up to
/// `config.threads` threads; the result does not depend on scheduling.
pub fn train_ensemble(
    config: &EnsembleConfig,
    corpus: &Corpus,
    pretrained: Option<&EmbeddingTable>,
    progress: Option<Sender<ProgressEvent>>,
) -> Result<Ensemble> {
    config.validate()?;
    if corpus.labels.is_empty() || corpus.labels.len() != corpus.features.len() {
        return Err(RmdlError::Incompatible(format!(
            "{} labels for {} feature rows",
            corpus.labels.len(),
            corpus.features.len()
        )));
    }
    let k = corpus.classes.len();
    if let Some(&bad) = corpus.labels.iter().find(|&&l| l >= k) {
        return Err(RmdlError::Incompatible(format!("label {bad} with {k} classes")));
    }
    let input = corpus.preprocessor.descriptor();
    if let (Some(table), InputDescriptor::Text { .. }) = (pretrained, &input) {
        if table.dim() != config.embedding_dim {
            return Err(RmdlError::Config(format!(
                "embedding_dim {} differs from word vector width {}",
                config.embedding_dim,
                table.dim()
            )));
        }
    }
    let specs = config
        .families()
        .into_iter()
        .enumerate()
        .map(|(i, family)| {
            sample_architecture(
                family,
                &config.ranges,
                &input,
                k,
                config.embedding_dim,
                mix_seed(config.seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let n = specs.len();
    let workers = config.threads.unwrap_or(n).clamp(1, n);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<(Member, Vec<EpochRecord>)>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = progress.clone();
            let (next, slots, specs) = (&next, &slots, &specs);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let outcome = train_member(i, specs[i].clone(), corpus, config, pretrained, tx.as_ref());
                *slots[i].lock().expect("no other holder panics") = Some(outcome);
            });
        }
    });

    let mut members = Vec::with_capacity(n);
    let mut history = Vec::new();
    for slot in slots {
        let (member, records) = slot
            .into_inner()
            .expect("no other holder panics")
            .expect("every index is claimed by a worker")?;
        members.push(member);
        history.extend(records);
    }
    if members.iter().all(|m| m.failed) {
        return Err(RmdlError::AllFailed { models: n });
    }
    Ok(Ensemble {
        config: config.clone(),
        preprocessor: corpus.preprocessor.clone(),
        classes: corpus.classes.clone(),
        members,
        history,
    })
}

impl Ensemble {
    /// Assembles an ensemble from already-built members, e.g. hand-made ones.
    pub fn from_members(
        config: EnsembleConfig,
        preprocessor: Preprocessor,
        classes: Vec<String>,
        members: Vec<Member>,
    ) -> Result<Self> {
        let input = preprocessor.descriptor();
        for m in &members {
            if m.spec.classes != classes.len() || m.spec.input != input {
                return Err(RmdlError::Incompatible(format!(
                    "member {} does not match the ensemble's classes or inputs",
                    m.id
                )));
            }
        }
        if members.is_empty() {
            return Err(RmdlError::Config("no members".into()));
        }
        Ok(Ensemble {
            config,
            preprocessor,
            classes,
            members,
            history: Vec::new(),
        })
    }

    pub fn active(&self) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(|m| !m.failed)
    }

    /// Labels of `dataset` renumbered to this ensemble's class order.
    pub fn align_labels(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        if dataset.num_classes() != self.classes.len() {
            return Err(RmdlError::Incompatible(format!(
                "models were trained for {} classes, dataset has {}",
                self.classes.len(),
                dataset.num_classes()
            )));
        }
        let map = dataset
            .classes
            .iter()
            .map(|name| {
                self.classes
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| RmdlError::Incompatible(format!("unknown class {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(dataset.labels.iter().map(|&l| map[l]).collect())
    }

    pub fn features(&self, dataset: &Dataset) -> Result<FeatureSet> {
        self.preprocessor.transform(dataset)
    }

    fn check_features(&self, features: &FeatureSet) -> Result<()> {
        let input = self.preprocessor.descriptor();
        for m in self.active() {
            let view = input.view(m.spec.family);
            let have = features.item_shape(view)?;
            let want = match (&input, view) {
                (InputDescriptor::Image { height, width, channels }, v) => match v {
                    crate::features::InputView::Flat => vec![height * width * channels],
                    crate::features::InputView::Grid => vec![*height, *width, *channels],
                    _ => vec![*height, width * channels],
                },
                (InputDescriptor::Text { tfidf_dim, .. }, crate::features::InputView::Tfidf) => vec![*tfidf_dim],
                (InputDescriptor::Text { max_len, .. }, _) => vec![*max_len],
            };
            if have != want {
                return Err(RmdlError::Incompatible(format!(
                    "model {} expects items of shape {want:?}, got {have:?}",
                    m.id
                )));
            }
        }
        Ok(())
    }

    /// `N×K` class probabilities from every voting member, in member order.
    pub fn predict_proba(&self, features: &FeatureSet) -> Result<Vec<(usize, Tensor)>> {
        self.check_features(features)?;
        let n = features.len();
        let k = self.classes.len();
        let mut out = Vec::new();
        for m in self.active() {
            let view = m.spec.view();
            let mut data = Vec::with_capacity(n * k);
            for start in (0..n).step_by(PREDICT_CHUNK) {
                let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
                let p = m.network.predict_proba(&features.batch(view, &idx)?)?;
                data.extend_from_slice(p.data());
            }
            out.push((m.id, Tensor::from_values(&[n, k], data)?));
        }
        Ok(out)
    }

    /// Voted labels for every item.
    pub fn predict(&self, features: &FeatureSet) -> Result<Vec<usize>> {
        let probs = self.predict_proba(features)?;
        Self::vote_all(self.config.vote, &probs, features.len(), self.classes.len())
    }

    fn vote_all(mode: VoteMode, probs: &[(usize, Tensor)], n: usize, k: usize) -> Result<Vec<usize>> {
        (0..n)
            .map(|i| {
                let rows: Vec<&[f64]> = probs.iter().map(|(_, p)| &p.data()[i * k..(i + 1) * k]).collect();
                mode.vote(&rows)
            })
            .collect()
    }

    pub fn evaluate(&self, features: &FeatureSet, labels: &[usize]) -> Result<Evaluation> {
        let probs = self.predict_proba(features)?;
        let k = self.classes.len();
        let predictions = Self::vote_all(self.config.vote, &probs, features.len(), k)?;
        let metric = |e| RmdlError::Incompatible(format!("{e}"));
        let member_accuracy = probs
            .iter()
            .map(|(id, p)| {
                let own: Vec<usize> = p.data().chunks_exact(k).map(argmax).collect();
                Ok((*id, accuracy(labels, &own).map_err(metric)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let counts = confusion(labels, &predictions, k).map_err(metric)?;
        Ok(Evaluation {
            accuracy: accuracy(labels, &predictions).map_err(metric)?,
            micro: micro_scores(&counts),
            member_accuracy,
            predictions,
        })
    }
}

/// Training history as `epoch,model_id,family,loss,accuracy` rows.
pub fn write_history_csv(records: &[EpochRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,model_id,family,loss,accuracy")?;
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.model_id, r.family.name(), r.loss, r.accuracy)?;
    }
    Ok(())
}
