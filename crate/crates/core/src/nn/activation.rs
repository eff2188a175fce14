use rand::RngCore;

use super::{LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::Tensor;

/// Logistic function, written so that neither branch overflows.
#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Softmax over a slice with max-subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax of a vector (all elements form one distribution).
pub fn softmax(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    softmax_in_place(out.data_mut());
    out
}

/// Softmax along the last axis.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    let k = *z.shape().last().unwrap_or(&1);
    for row in out.data_mut().chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Relu,
    Tanh,
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone)]
pub struct Activation {
    kind: ActivationKind,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind }
    }

    pub fn sigmoid() -> Self {
        Self::new(ActivationKind::Sigmoid)
    }

    pub fn relu() -> Self {
        Self::new(ActivationKind::Relu)
    }

    pub fn tanh() -> Self {
        Self::new(ActivationKind::Tanh)
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }
}

impl LayerOps for Activation {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        Ok(match self.kind {
            ActivationKind::Relu => (relu(x), LayerState::Input(x.clone())),
            ActivationKind::Sigmoid => {
                let y = sigmoid(x);
                (y.clone(), LayerState::Output(y))
            }
            ActivationKind::Tanh => {
                let y = x.map(f64::tanh);
                (y.clone(), LayerState::Output(y))
            }
        })
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        if !need_input_grad {
            return Ok(None);
        }
        let (cached, derivative): (Tensor, fn(f64) -> f64) = match (self.kind, state) {
            (ActivationKind::Relu, LayerState::Input(x)) => (x, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            (ActivationKind::Sigmoid, LayerState::Output(y)) => (y, |y| y * (1.0 - y)),
            (ActivationKind::Tanh, LayerState::Output(y)) => (y, |y| 1.0 - y * y),
            _ => return Err(NnError::StateMismatch { layer: "activation" }),
        };
        if cached.shape() != grad.shape() {
            return Err(NnError::InputShape {
                layer: "activation",
                expected: format!("gradient of shape {:?}", cached.shape()),
                actual: grad.shape().to_vec(),
            });
        }
        let data = cached
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&c, &g)| g * derivative(c))
            .collect();
        Ok(Some(Tensor::from_values(grad.shape(), data)?))
    }
}

/// Softmax over the last axis as a standalone layer.
///
/// Classifier networks emit logits and fold the softmax into the loss; this
/// layer exists for networks that need normalized outputs mid-stack.
#[derive(Debug, Clone, Default)]
pub struct Softmax;

impl LayerOps for Softmax {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        let y = softmax_rows(x);
        Ok((y.clone(), LayerState::Output(y)))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Output(y) = state else {
            return Err(NnError::StateMismatch { layer: "softmax" });
        };
        if !need_input_grad {
            return Ok(None);
        }
        let k = *y.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; y.len()];
        for ((yr, gr), or) in y
            .data()
            .chunks_exact(k)
            .zip(grad.data().chunks_exact(k))
            .zip(out.chunks_exact_mut(k))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - dot);
            }
        }
        Ok(Some(Tensor::from_values(y.shape(), out)?))
    }
}
