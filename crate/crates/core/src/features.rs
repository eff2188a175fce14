//! Text and image feature extraction: tokenization, n-gram counts, TF-IDF,
//! word-vector lookup and pixel normalization.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot fit a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary has no terms")]
    EmptyVocabulary,
    #[error("word vectors: empty input")]
    EmptyStream,
    #[error("word vectors line {line}: {reason}")]
    VectorLine { line: usize, reason: String },
    #[error("word vectors: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Every contiguous n-gram for `n` in `1..=n_max`, space-joined.
fn ngrams(terms: &[String], n_max: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n_max.max(1)).flat_map(move |n| terms.windows(n).map(|w| w.join(" ")))
}

pub fn ngram_counts(terms: &[String], n_max: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for g in ngrams(terms, n_max) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Term index with document frequencies. Index 0 is reserved for padding and
/// unknown terms; real terms start at 1 in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyData", into = "VocabularyData")]
pub struct Vocabulary {
    terms: Vec<String>,
    df: Vec<usize>,
    docs: usize,
    ngram_max: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyData {
    terms: Vec<String>,
    df: Vec<usize>,
    docs: usize,
    ngram_max: usize,
}

impl From<VocabularyData> for Vocabulary {
    fn from(d: VocabularyData) -> Self {
        let index = d.terms.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        Vocabulary {
            terms: d.terms,
            df: d.df,
            docs: d.docs,
            ngram_max: d.ngram_max,
            index,
        }
    }
}

impl From<Vocabulary> for VocabularyData {
    fn from(v: Vocabulary) -> Self {
        VocabularyData {
            terms: v.terms,
            df: v.df,
            docs: v.docs,
            ngram_max: v.ngram_max,
        }
    }
}

impl Vocabulary {
    /// Fits on tokenized documents. With `max_terms`, only the terms with the
    /// highest document frequency are kept (ties by first occurrence).
    pub fn fit(docs: &[Vec<String>], ngram_max: usize, max_terms: Option<usize>) -> Result<Self> {
        if docs.is_empty() {
            return Err(FeatureError::EmptyCorpus);
        }
        let ngram_max = ngram_max.max(1);
        let mut order: Vec<String> = Vec::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let unique: BTreeMap<String, usize> = ngram_counts(doc, ngram_max);
            // first-occurrence order needs document order, not sorted order
            for g in ngrams(doc, ngram_max) {
                if !df.contains_key(&g) {
                    df.insert(g.clone(), 0);
                    order.push(g);
                }
            }
            for g in unique.into_keys() {
                *df.get_mut(&g).expect("inserted above") += 1;
            }
        }
        if let Some(cap) = max_terms.filter(|&cap| cap < order.len()) {
            let mut ranked: Vec<usize> = (0..order.len()).collect();
            ranked.sort_by(|&a, &b| df[&order[b]].cmp(&df[&order[a]]).then(a.cmp(&b)));
            let mut keep = ranked[..cap].to_vec();
            keep.sort_unstable();
            order = keep.into_iter().map(|i| std::mem::take(&mut order[i])).collect();
        }
        let dfs = order.iter().map(|t| df[t]).collect();
        Ok(VocabularyData {
            terms: order,
            df: dfs,
            docs: docs.len(),
            ngram_max,
        }
        .into())
    }

    /// Number of real terms (the reserved index is not counted).
    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Size of an index space including the reserved slot.
    pub fn index_len(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn ngram_max(&self) -> usize {
        self.ngram_max
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.terms.get(i)).map(String::as_str)
    }

    pub fn df(&self, term: &str) -> Option<usize> {
        self.index_of(term).map(|i| self.df[i - 1])
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.df(term).map(|df| self.idf_of(df))
    }

    fn idf_of(&self, df: usize) -> f64 {
        ((1.0 + self.docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    /// L2-normalized TF-IDF weights. Column `j` corresponds to term index
    /// `j + 1`. Unknown terms are ignored.
    pub fn tfidf_transform(&self, terms: &[String]) -> Result<SparseVec> {
        if self.terms.is_empty() {
            return Err(FeatureError::EmptyVocabulary);
        }
        let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
        for g in ngrams(terms, self.ngram_max) {
            if let Some(i) = self.index_of(&g) {
                *tf.entry(i - 1).or_insert(0) += 1;
            }
        }
        let mut values: Vec<f64> = tf
            .iter()
            .map(|(&col, &count)| count as f64 * self.idf_of(self.df[col]))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(SparseVec {
            dim: self.terms.len(),
            indices: tf.into_keys().collect(),
            values,
        })
    }

    /// Term indices of `terms` truncated or zero-padded to `max_len`.
    pub fn encode(&self, terms: &[String], max_len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = terms
            .iter()
            .take(max_len)
            .map(|t| self.index_of(t).unwrap_or(0))
            .collect();
        out.resize(max_len, 0);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pretrained word vectors in the whitespace-separated GloVe text format.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(reader: impl BufRead) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            let Some(term) = parts.next() else {
                continue;
            };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| FeatureError::VectorLine {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            if table.vectors.is_empty() && table.dim == 0 {
                if values.is_empty() {
                    return Err(FeatureError::VectorLine {
                        line: lineno,
                        reason: "term has no components".into(),
                    });
                }
                table.dim = values.len();
            } else if values.len() != table.dim {
                return Err(FeatureError::VectorLine {
                    line: lineno,
                    reason: format!("expected {} components, found {}", table.dim, values.len()),
                });
            }
            table.vectors.insert(term.to_string(), values);
        }
        if table.vectors.is_empty() {
            return Err(FeatureError::EmptyStream);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The vector for `term`, or zeros when it is unknown.
    pub fn lookup(&self, term: &str) -> Vec<f64> {
        self.vectors.get(term).cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// `V×D` matrix whose row `i` is the vector for vocabulary index `i`.
    pub fn matrix_for(&self, vocab: &Vocabulary) -> Result<Tensor> {
        let mut data = vec![0.0; self.dim];
        for i in 1..vocab.index_len() {
            data.extend(self.lookup(vocab.term(i).expect("index in range")));
        }
        Ok(Tensor::from_values(&[vocab.index_len(), self.dim], data)?)
    }
}

/// `max_len×D` document matrix: one row per term, zero rows as padding and
/// truncation at the tail.
pub fn embed_document(terms: &[String], table: &EmbeddingTable, max_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(max_len * table.dim());
    for t in terms.iter().take(max_len) {
        data.extend(table.lookup(t));
    }
    data.resize(max_len * table.dim(), 0.0);
    Ok(Tensor::from_values(&[max_len, table.dim()], data)?)
}

/// Bytes in `h×w×c` order scaled to `[0, 1]`.
pub fn normalize_image(raw: &[u8], shape: [usize; 3]) -> Result<Tensor> {
    let expected: usize = shape.iter().product();
    if raw.len() != expected {
        return Err(FeatureError::Shape(format!(
            "image has {} bytes, {shape:?} needs {expected}",
            raw.len()
        )));
    }
    Ok(Tensor::from_values(&shape, raw.iter().map(|&b| b as f64 / 255.0).collect())?)
}

/// Settings for fitting text features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextOptions {
    pub ngram_max: usize,
    /// Cap on TF-IDF terms; `None` keeps all.
    pub max_vocab: Option<usize>,
    /// Token sequence length for embedding-based models.
    pub max_len: usize,
}

impl Default for TextOptions {
    fn default() -> Self {
        TextOptions {
            ngram_max: 2,
            max_vocab: Some(20_000),
            max_len: 100,
        }
    }
}

/// Fitted text features: a TF-IDF vocabulary for dense models and a unigram
/// vocabulary for token-sequence models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPreprocessor {
    pub options: TextOptions,
    pub tfidf: Vocabulary,
    pub tokens: Vocabulary,
}

impl TextPreprocessor {
    pub fn fit(docs: &[Vec<String>], options: TextOptions) -> Result<Self> {
        let tfidf = Vocabulary::fit(docs, options.ngram_max, options.max_vocab)?;
        let tokens = Vocabulary::fit(docs, 1, options.max_vocab)?;
        if tfidf.num_terms() == 0 {
            return Err(FeatureError::EmptyVocabulary);
        }
        Ok(TextPreprocessor { options, tfidf, tokens })
    }

    pub fn transform(&self, docs: &[Vec<String>]) -> Result<FeatureSet> {
        let tfidf = docs
            .iter()
            .map(|d| self.tfidf.tfidf_transform(d))
            .collect::<Result<Vec<_>>>()?;
        let tokens = docs.iter().map(|d| self.tokens.encode(d, self.options.max_len)).collect();
        Ok(FeatureSet::Text {
            tfidf,
            tfidf_dim: self.tfidf.num_terms(),
            tokens,
            vocab: self.tokens.index_len(),
        })
    }
}

/// How a model family wants its inputs laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputView {
    /// Images flattened to `B×(H·W·C)`.
    Flat,
    /// Images as `B×H×W×C`.
    Grid,
    /// Images as sequences of pixel rows, `B×H×(W·C)`.
    Rows,
    /// Dense TF-IDF rows, `B×V`.
    Tfidf,
    /// Token indices, `B×L`.
    Tokens,
}

/// Model-ready inputs for a whole dataset; batches are materialized on
/// demand so large sparse TF-IDF matrices never exist densely in full.
#[derive(Debug, Clone)]
pub enum FeatureSet {
    Image {
        /// `N×H×W×C` in `[0, 1]`.
        images: Tensor,
    },
    Text {
        tfidf: Vec<SparseVec>,
        tfidf_dim: usize,
        tokens: Vec<Vec<usize>>,
        vocab: usize,
    },
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        match self {
            FeatureSet::Image { images } => images.shape().first().copied().unwrap_or(0),
            FeatureSet::Text { tokens, .. } => tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-item shape of the given view, without the batch axis.
    pub fn item_shape(&self, view: InputView) -> Result<Vec<usize>> {
        match (self, view) {
            (FeatureSet::Image { images }, _) => {
                let &[_, h, w, c] = images.shape() else {
                    return Err(FeatureError::Shape(format!("images have shape {:?}", images.shape())));
                };
                match view {
                    InputView::Flat => Ok(vec![h * w * c]),
                    InputView::Grid => Ok(vec![h, w, c]),
                    InputView::Rows => Ok(vec![h, w * c]),
                    _ => Err(FeatureError::Shape(format!("{view:?} view needs text features"))),
                }
            }
            (FeatureSet::Text { tfidf_dim, .. }, InputView::Tfidf) => Ok(vec![*tfidf_dim]),
            (FeatureSet::Text { tokens, .. }, InputView::Tokens) => {
                Ok(vec![tokens.first().map_or(0, Vec::len)])
            }
            (FeatureSet::Text { .. }, _) => Err(FeatureError::Shape(format!("{view:?} view needs image features"))),
        }
    }

    pub fn batch(&self, view: InputView, idx: &[usize]) -> Result<Tensor> {
        let item = self.item_shape(view)?;
        let width: usize = item.iter().product();
        let mut shape = vec![idx.len()];
        shape.extend(&item);
        let mut data = Vec::with_capacity(idx.len() * width);
        match self {
            FeatureSet::Image { images } => {
                for &i in idx {
                    data.extend_from_slice(&images.data()[i * width..(i + 1) * width]);
                }
            }
            FeatureSet::Text { tfidf, tokens, .. } => {
                for &i in idx {
                    match view {
                        InputView::Tfidf => data.extend(tfidf[i].to_dense()),
                        _ => data.extend(tokens[i].iter().map(|&t| t as f64)),
                    }
                }
            }
        }
        Ok(Tensor::from_values(&shape, data)?)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<FeatureSet> {
        Ok(match self {
            FeatureSet::Image { .. } => FeatureSet::Image {
                images: self.batch(InputView::Grid, idx)?,
            },
            FeatureSet::Text {
                tfidf,
                tfidf_dim,
                tokens,
                vocab,
            } => FeatureSet::Text {
                tfidf: idx.iter().map(|&i| tfidf[i].clone()).collect(),
                tfidf_dim: *tfidf_dim,
                tokens: idx.iter().map(|&i| tokens[i].clone()).collect(),
                vocab: *vocab,
            },
        })
    }
}
