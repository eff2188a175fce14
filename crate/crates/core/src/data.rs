//! Dataset loading (IDX image files, tab-separated text corpora), splits and
//! batch iteration.

use std::io::{BufRead, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::tokenize;
use crate::tensor::{Tensor, TensorError};

const IMAGE_MAGIC: u32 = 0x0803;
const LABEL_MAGIC: u32 = 0x0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { what: &'static str, expected: u32, found: u32 },
    #[error("{what}: truncated, needed {needed} bytes but found {found}")]
    Truncated { what: &'static str, needed: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("split fraction {fraction} leaves an empty half of {items} items")]
    Split { fraction: f64, items: usize },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// `N×H×W×C` pixels in `[0, 1]`.
    Image(Tensor),
    /// Tokenized documents.
    Text(Vec<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Features,
    pub labels: Vec<usize>,
    /// Label names; the class count `K` is their number.
    pub classes: Vec<String>,
}

fn read_all(mut reader: impl Read, what: &str) -> Result<Vec<u8>> {
    let io_err = |source| DataError::Io {
        path: what.to_string(),
        source,
    };
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io_err)?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or(DataError::Truncated {
            what,
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Validates an IDX header and returns its dimensions and payload.
fn idx_payload<'a>(bytes: &'a [u8], magic: u32, what: &'static str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, what)?;
    if found != magic {
        return Err(DataError::Magic {
            what,
            expected: magic,
            found,
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let needed = start + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            what,
            needed,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[start..needed]))
}

/// Reads an IDX image file and its label file, either plain or gzipped.
/// Classes are the digits `0..=max label`.
pub fn load_mnist_idx(images: impl Read, labels: impl Read) -> Result<Dataset> {
    let img = read_all(images, "image file")?;
    let lbl = read_all(labels, "label file")?;
    let (dims, pixels) = idx_payload(&img, IMAGE_MAGIC, "image file")?;
    let (ldims, label_bytes) = idx_payload(&lbl, LABEL_MAGIC, "label file")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features: Features::Image(pixels_to_tensor(pixels, [n, h, w])?),
        labels,
        classes: (0..k).map(|c| c.to_string()).collect(),
    })
}

fn pixels_to_tensor(pixels: &[u8], [n, h, w]: [usize; 3]) -> Result<Tensor> {
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_values(&[n, h, w, 1], data)?)
}

/// Reads an unlabelled IDX image file as `N×H×W×1`.
pub fn load_idx_images(images: impl Read) -> Result<Tensor> {
    let img = read_all(images, "image file")?;
    let (dims, pixels) = idx_payload(&img, IMAGE_MAGIC, "image file")?;
    if dims[0] == 0 {
        return Err(DataError::Empty);
    }
    pixels_to_tensor(pixels, [dims[0], dims[1], dims[2]])
}

pub fn load_mnist_files(images: &Path, labels: &Path) -> Result<Dataset> {
    let open = |p: &Path| {
        std::fs::File::open(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    load_mnist_idx(open(images)?, open(labels)?)
}

/// Reads `label<TAB>text` records. Labels are numbered in order of first
/// appearance; blank lines are skipped.
pub fn load_text_corpus(reader: impl BufRead) -> Result<Dataset> {
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: format!("line {}", i + 1),
            source,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(DataError::Parse {
                line: i + 1,
                reason: "missing tab between label and text".into(),
            });
        };
        let id = match classes.iter().position(|c| c == label) {
            Some(id) => id,
            None => {
                classes.push(label.to_string());
                classes.len() - 1
            }
        };
        labels.push(id);
        docs.push(tokenize(text));
    }
    if docs.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        features: Features::Text(docs),
        labels,
        classes,
    })
}

pub fn load_text_file(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_text_corpus(std::io::BufReader::new(file))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Items at `idx`, in that order, with the same class list.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(DataError::Empty);
        }
        let features = match &self.features {
            Features::Image(t) => {
                let item: usize = t.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(idx.len() * item);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * item..(i + 1) * item]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                Features::Image(Tensor::from_values(&shape, data)?)
            }
            Features::Text(docs) => Features::Text(idx.iter().map(|&i| docs[i].clone()).collect()),
        };
        Ok(Dataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
        })
    }

    /// Items `start..end` in file order.
    pub fn range(&self, start: usize, end: usize) -> Result<Dataset> {
        let end = end.min(self.len());
        self.subset(&(start.min(end)..end).collect::<Vec<_>>())
    }

    /// Seeded shuffle, then the first `round(fraction·N)` items train.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let cut = (fraction * n as f64).round() as usize;
        if !(fraction > 0.0 && fraction < 1.0) || cut == 0 || cut >= n {
            return Err(DataError::Split { fraction, items: n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..cut])?, self.subset(&order[cut..])?))
    }
}

/// Index batches covering `0..len` once, optionally in a seeded order. The
/// last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

pub fn batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches> {
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        order,
        size: batch_size,
        pos: 0,
    })
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}
