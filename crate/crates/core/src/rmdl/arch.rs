//! Random architecture sampling and network construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Result, RmdlError};
use crate::features::InputView;
use crate::nn::{
    conv_output_len, Activation, Conv1d, Conv2d, Dense, Dropout, Embedding, Flatten, Gru, Layer, Lstm, MaxPool,
    Network,
};
use crate::optim::{Hyper, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dnn,
    Cnn,
    Rnn,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Dnn => "dnn",
            Family::Cnn => "cnn",
            Family::Rnn => "rnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

/// Shape of the model inputs a dataset provides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputDescriptor {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Text {
        /// TF-IDF width for dense models.
        tfidf_dim: usize,
        /// Token index space, including the reserved index 0.
        vocab: usize,
        max_len: usize,
    },
}

impl InputDescriptor {
    /// Text goes to dense models as TF-IDF and to CNN/RNN models as tokens;
    /// images go flat, as a grid, or as a sequence of pixel rows.
    pub fn view(&self, family: Family) -> InputView {
        match (self, family) {
            (InputDescriptor::Image { .. }, Family::Dnn) => InputView::Flat,
            (InputDescriptor::Image { .. }, Family::Cnn) => InputView::Grid,
            (InputDescriptor::Image { .. }, Family::Rnn) => InputView::Rows,
            (InputDescriptor::Text { .. }, Family::Dnn) => InputView::Tfidf,
            (InputDescriptor::Text { .. }, _) => InputView::Tokens,
        }
    }
}

/// Inclusive `[min, max]` integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(RmdlError::Ranges(format!("{name}: [{}, {}] is empty or starts at 0", self.min, self.max)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub dnn_layers: Span,
    pub dnn_units: Span,
    pub cnn_blocks: Span,
    pub cnn_kernels: Vec<usize>,
    pub cnn_filters: Span,
    pub rnn_layers: Span,
    pub rnn_units: Span,
    pub cells: Vec<CellKind>,
    /// Dropout rates are drawn uniformly from `[0, max_dropout]`.
    pub max_dropout: f64,
    pub optimizers: Vec<OptimizerKind>,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            dnn_layers: Span::new(1, 4),
            dnn_units: Span::new(64, 512),
            cnn_blocks: Span::new(1, 3),
            cnn_kernels: vec![3, 5],
            cnn_filters: Span::new(16, 128),
            rnn_layers: Span::new(1, 2),
            rnn_units: Span::new(32, 256),
            cells: vec![CellKind::Lstm, CellKind::Gru],
            max_dropout: 0.5,
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::RmsProp],
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        self.dnn_layers.check("dnn_layers")?;
        self.dnn_units.check("dnn_units")?;
        self.cnn_blocks.check("cnn_blocks")?;
        self.cnn_filters.check("cnn_filters")?;
        self.rnn_layers.check("rnn_layers")?;
        self.rnn_units.check("rnn_units")?;
        if self.cnn_kernels.is_empty() || self.cnn_kernels.contains(&0) {
            return Err(RmdlError::Ranges("cnn_kernels must list positive sizes".into()));
        }
        if self.cells.is_empty() {
            return Err(RmdlError::Ranges("cells is empty".into()));
        }
        if self.optimizers.is_empty() {
            return Err(RmdlError::Ranges("optimizers is empty".into()));
        }
        if !(0.0..1.0).contains(&self.max_dropout) {
            return Err(RmdlError::Ranges(format!("max_dropout {} outside [0, 1)", self.max_dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub units: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
}

/// Window and stride of the pooling that closes every conv block.
pub const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Body {
    Dnn {
        hidden: Vec<HiddenLayer>,
    },
    Cnn {
        /// Embedding width for token inputs.
        embedding_dim: Option<usize>,
        blocks: Vec<ConvBlock>,
        dropout: f64,
    },
    Rnn {
        embedding_dim: Option<usize>,
        cell: CellKind,
        units: Vec<usize>,
        dropout: f64,
    },
}

/// Everything needed to rebuild one model's network and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub seed: u64,
    pub input: InputDescriptor,
    pub classes: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub body: Body,
}

fn dropout(max: f64, rng: &mut ChaCha8Rng) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen_range(0.0..=max)
    }
}

/// Draws an architecture for `family` from `ranges`. CNN blocks that would
/// shrink the input below one pooling window are dropped.
pub fn sample_architecture(
    family: Family,
    ranges: &SamplingRanges,
    input: &InputDescriptor,
    classes: usize,
    embedding_dim: usize,
    seed: u64,
) -> Result<ArchitectureSpec> {
    ranges.validate()?;
    if classes < 2 {
        return Err(RmdlError::Ranges(format!("need at least 2 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = match input {
        InputDescriptor::Text { .. } => Some(embedding_dim),
        InputDescriptor::Image { .. } => None,
    };
    let body = match family {
        Family::Dnn => {
            let layers = ranges.dnn_layers.sample(&mut rng);
            Body::Dnn {
                hidden: (0..layers)
                    .map(|_| HiddenLayer {
                        units: ranges.dnn_units.sample(&mut rng),
                        dropout: dropout(ranges.max_dropout, &mut rng),
                    })
                    .collect(),
            }
        }
        Family::Cnn => {
            let wanted = ranges.cnn_blocks.sample(&mut rng);
            let mut extent = match input {
                InputDescriptor::Image { height, width, .. } => [*height, *width],
                InputDescriptor::Text { max_len, .. } => [1, *max_len],
            };
            let two_d = matches!(input, InputDescriptor::Image { .. });
            let mut blocks = Vec::with_capacity(wanted);
            for _ in 0..wanted {
                let block = ConvBlock {
                    filters: ranges.cnn_filters.sample(&mut rng),
                    kernel: *ranges.cnn_kernels.choose(&mut rng).expect("validated"),
                };
                let next = block_extent(extent, block.kernel, two_d);
                match next {
                    Some(e) => {
                        extent = e;
                        blocks.push(block);
                    }
                    None => break,
                }
            }
            if blocks.is_empty() {
                return Err(RmdlError::Ranges(format!(
                    "input extent {extent:?} too small for any sampled conv block"
                )));
            }
            Body::Cnn {
                embedding_dim: embedding,
                blocks,
                dropout: dropout(ranges.max_dropout, &mut rng),
            }
        }
        Family::Rnn => {
            let layers = ranges.rnn_layers.sample(&mut rng);
            let cell = *ranges.cells.choose(&mut rng).expect("validated");
            Body::Rnn {
                embedding_dim: embedding,
                cell,
                units: (0..layers).map(|_| ranges.rnn_units.sample(&mut rng)).collect(),
                dropout: dropout(ranges.max_dropout, &mut rng),
            }
        }
    };
    let optimizer = *ranges.optimizers.choose(&mut rng).expect("validated");
    Ok(ArchitectureSpec {
        family,
        seed,
        input: input.clone(),
        classes,
        optimizer,
        learning_rate: Hyper::defaults(optimizer).learning_rate,
        body,
    })
}

/// Spatial extent after a valid conv of size `kernel` and a 2-wide pool, or
/// `None` when the block does not fit.
fn block_extent([h, w]: [usize; 2], kernel: usize, two_d: bool) -> Option<[usize; 2]> {
    let w = conv_output_len(conv_output_len(w, kernel, 1)?, POOL, POOL)?;
    let h = if two_d {
        conv_output_len(conv_output_len(h, kernel, 1)?, POOL, POOL)?
    } else {
        h
    };
    Some([h, w])
}

const INIT_SALT: u64 = 0x1d1d_5eed;

impl ArchitectureSpec {
    pub fn view(&self) -> InputView {
        self.input.view(self.family)
    }

    pub fn hyper(&self) -> Hyper {
        let mut h = Hyper::defaults(self.optimizer);
        h.learning_rate = self.learning_rate;
        h
    }

    /// Builds the network with freshly initialized parameters. The same spec
    /// always yields bit-identical parameters.
    pub fn build(&self) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, INIT_SALT));
        let mut layers: Vec<Layer> = Vec::new();
        let k = self.classes;
        match (&self.body, &self.input) {
            (Body::Dnn { hidden }, input) => {
                let mut width = match input {
                    InputDescriptor::Image {
                        height,
                        width,
                        channels,
                    } => height * width * channels,
                    InputDescriptor::Text { tfidf_dim, .. } => *tfidf_dim,
                };
                for h in hidden {
                    layers.push(Dense::new(width, h.units, &mut rng)?.into());
                    layers.push(Activation::relu().into());
                    layers.push(Dropout::new(h.dropout)?.into());
                    width = h.units;
                }
                layers.push(Dense::new(width, k, &mut rng)?.into());
            }
            (
                Body::Cnn {
                    embedding_dim,
                    blocks,
                    dropout,
                },
                input,
            ) => {
                let two_d = matches!(input, InputDescriptor::Image { .. });
                let (mut extent, mut channels) = match input {
                    InputDescriptor::Image {
                        height,
                        width,
                        channels,
                    } => ([*height, *width], *channels),
                    InputDescriptor::Text { vocab, max_len, .. } => {
                        let dim = embedding_dim.ok_or_else(|| RmdlError::Ranges("text CNN needs an embedding width".into()))?;
                        layers.push(Embedding::new(*vocab, dim, &mut rng)?.into());
                        ([1, *max_len], dim)
                    }
                };
                for b in blocks {
                    if two_d {
                        layers.push(Conv2d::new(channels, b.filters, b.kernel, 1, &mut rng)?.into());
                    } else {
                        layers.push(Conv1d::new(channels, b.filters, b.kernel, 1, &mut rng)?.into());
                    }
                    layers.push(Activation::relu().into());
                    layers.push(MaxPool::new(POOL, POOL)?.into());
                    extent = block_extent(extent, b.kernel, two_d)
                        .ok_or_else(|| RmdlError::Ranges(format!("conv block {b:?} does not fit extent {extent:?}")))?;
                    channels = b.filters;
                }
                layers.push(Flatten.into());
                layers.push(Dropout::new(*dropout)?.into());
                layers.push(Dense::new(extent[0] * extent[1] * channels, k, &mut rng)?.into());
            }
            (
                Body::Rnn {
                    embedding_dim,
                    cell,
                    units,
                    dropout,
                },
                input,
            ) => {
                let mut width = match input {
                    InputDescriptor::Image { width, channels, .. } => width * channels,
                    InputDescriptor::Text { vocab, .. } => {
                        let dim = embedding_dim.ok_or_else(|| RmdlError::Ranges("text RNN needs an embedding width".into()))?;
                        layers.push(Embedding::new(*vocab, dim, &mut rng)?.into());
                        dim
                    }
                };
                for (i, &u) in units.iter().enumerate() {
                    let seq = i + 1 < units.len();
                    layers.push(match cell {
                        CellKind::Lstm => Lstm::new(width, u, seq, &mut rng)?.into(),
                        CellKind::Gru => Gru::new(width, u, seq, &mut rng)?.into(),
                    });
                    width = u;
                }
                layers.push(Dropout::new(*dropout)?.into());
                layers.push(Dense::new(width, k, &mut rng)?.into());
            }
        }
        Ok(Network::new(layers))
    }
}
