//! Layers with forward passes and analytic backward passes.
//!
//! Forward passes take `&self` and return the output together with a
//! [`LayerState`] holding whatever the backward pass needs. Inference can
//! therefore share a frozen network across threads, while training keeps the
//! states of one batch and hands each back exactly once to `backward`.
//!
//! All layers are batch-first: dense inputs are `B×F`, sequences `B×T×F`,
//! images `B×H×W×C`.

mod activation;
mod conv;
mod dense;
mod dropout;
mod embedding;
mod network;
mod pool;
mod recurrent;

pub use activation::{relu, sigmoid, softmax, softmax_rows, Activation, ActivationKind, Softmax};
pub use conv::{conv_output_len, Conv1d, Conv2d};
pub use dense::Dense;
pub use dropout::{dropout_apply, Dropout};
pub use embedding::Embedding;
pub use network::{loss_ce, Network};
pub use pool::{Flatten, MaxPool};
pub use recurrent::{Gru, GruGateCache, Lstm, LstmGateCache};

use rand::distributions::{Distribution, Uniform};
use rand::RngCore;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: expected input {expected}, got shape {actual:?}")]
    InputShape {
        layer: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("{layer}: window {window} does not fit input extent {extent}")]
    WindowTooLarge {
        layer: &'static str,
        window: usize,
        extent: usize,
    },
    #[error("{layer}: invalid hyperparameter: {reason}")]
    Hyper { layer: &'static str, reason: String },
    #[error("{layer}: backward called with a state from a different layer kind")]
    StateMismatch { layer: &'static str },
    #[error("{layer}: token index {index} outside vocabulary of {vocab}")]
    TokenOutOfRange {
        layer: &'static str,
        index: f64,
        vocab: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch of {logits} logit rows but {labels} labels")]
    LabelCount { logits: usize, labels: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("backward called without a matching forward pass")]
    MissingState,
    #[error("parameter {index}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Training enables dropout masks; evaluation is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values cached by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum LayerState {
    /// The layer input (dense, ReLU).
    Input(Tensor),
    /// The layer output (sigmoid, tanh, softmax).
    Output(Tensor),
    Conv {
        cols: Vec<f64>,
        input_shape: Vec<usize>,
        out_h: usize,
        out_w: usize,
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    /// Dropout mask already scaled by `1/(1-p)`; `None` in eval mode.
    Mask(Option<Vec<f64>>),
    Tokens {
        indices: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Lstm {
        steps: Vec<LstmGateCache>,
        input_shape: Vec<usize>,
    },
    Gru {
        steps: Vec<GruGateCache>,
        input_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Sigmoid,
    Relu,
    Tanh,
    Softmax,
    Conv1d,
    Conv2d,
    MaxPool,
    Flatten,
    Dropout,
    Embedding,
    Lstm,
    Gru,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Activation(Activation),
    Softmax(Softmax),
    Conv1d(Conv1d),
    Conv2d(Conv2d),
    MaxPool(MaxPool),
    Flatten(Flatten),
    Dropout(Dropout),
    Embedding(Embedding),
    Lstm(Lstm),
    Gru(Gru),
}

macro_rules! dispatch {
    ($layer:expr, $l:ident => $body:expr) => {
        match $layer {
            Layer::Dense($l) => $body,
            Layer::Activation($l) => $body,
            Layer::Softmax($l) => $body,
            Layer::Conv1d($l) => $body,
            Layer::Conv2d($l) => $body,
            Layer::MaxPool($l) => $body,
            Layer::Flatten($l) => $body,
            Layer::Dropout($l) => $body,
            Layer::Embedding($l) => $body,
            Layer::Lstm($l) => $body,
            Layer::Gru($l) => $body,
        }
    };
}

/// Behaviour shared by every layer type.
pub trait LayerOps {
    fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)>;

    /// Stores parameter gradients in the layer and returns the gradient with
    /// respect to the input when `need_input_grad` is set.
    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>>;

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        Vec::new()
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Activation(a) => match a.kind() {
                ActivationKind::Sigmoid => LayerKind::Sigmoid,
                ActivationKind::Relu => LayerKind::Relu,
                ActivationKind::Tanh => LayerKind::Tanh,
            },
            Layer::Softmax(_) => LayerKind::Softmax,
            Layer::Conv1d(_) => LayerKind::Conv1d,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Embedding(_) => LayerKind::Embedding,
            Layer::Lstm(_) => LayerKind::Lstm,
            Layer::Gru(_) => LayerKind::Gru,
        }
    }
}

impl LayerOps for Layer {
    fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        dispatch!(self, l => l.forward(x, mode, rng))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        dispatch!(self, l => l.backward(grad, state, need_input_grad))
    }

    fn params(&self) -> Vec<&Tensor> {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, l => l.params_mut())
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        dispatch!(self, l => l.params_and_grads())
    }
}

macro_rules! impl_from_layer {
    ($($variant:ident),*) => {
        $(impl From<$variant> for Layer {
            fn from(l: $variant) -> Self {
                Layer::$variant(l)
            }
        })*
    };
}

impl_from_layer!(Dense, Activation, Softmax, Conv1d, Conv2d, MaxPool, Flatten, Dropout, Embedding, Lstm, Gru);

/// Glorot/Xavier uniform initialization in `±sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_values(shape, values)?)
}

pub(crate) fn expect_rank(layer: &'static str, x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.rank() != rank {
        return Err(NnError::InputShape {
            layer,
            expected: what.to_string(),
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}
