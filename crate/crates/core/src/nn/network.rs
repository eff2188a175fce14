use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::softmax_in_place;
use super::{Layer, LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::Tensor;

/// A feed-forward stack of layers whose last layer emits unnormalized logits.
#[derive(Debug, Clone, Default)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn push(&mut self, layer: impl Into<Layer>) {
        self.layers.push(layer.into());
    }

    /// Runs every layer, returning the logits and one state per layer.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, Vec<LayerState>)> {
        let mut states = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, state) = layer.forward(&cur, mode, rng)?;
            states.push(state);
            cur = y;
        }
        Ok((cur, states))
    }

    /// Backpropagates `grad` (w.r.t. the logits) and returns the gradient
    /// w.r.t. the network input when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        grad: &Tensor,
        states: Vec<LayerState>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if states.len() != self.layers.len() {
            return Err(NnError::MissingState);
        }
        let mut cur = grad.clone();
        let last = self.layers.len();
        for (i, (layer, state)) in self.layers.iter_mut().zip(states).enumerate().rev() {
            let want = i > 0 || need_input_grad;
            match layer.backward(&cur, state, want)? {
                Some(g) => cur = g,
                None if i == 0 => return Ok(None),
                None => unreachable!("layer {i} of {last} returned no input gradient"),
            }
        }
        Ok(Some(cur))
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        // eval-mode layers never draw from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.0)
    }

    /// Eval-mode class probabilities, `B×K`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.logits(x)?;
        let k = *z.shape().last().unwrap_or(&1);
        z.data_mut().chunks_exact_mut(k).for_each(softmax_in_place);
        Ok(z)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        self.layers.iter_mut().flat_map(|l| l.params_and_grads()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Overwrites all parameters in order; shapes must match exactly.
    pub fn load_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(NnError::ParamShape {
                index: params.len().min(values.len()),
                expected: vec![params.len()],
                actual: vec![values.len()],
            });
        }
        for (index, (p, v)) in params.iter_mut().zip(values).enumerate() {
            if p.shape() != v.shape() {
                return Err(NnError::ParamShape {
                    index,
                    expected: p.shape().to_vec(),
                    actual: v.shape().to_vec(),
                });
            }
            p.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }
}

/// Mean categorical cross-entropy of softmax(`logits`) against integer
/// labels, with its gradient w.r.t. the logits, `(softmax - onehot) / B`.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [batch, classes] = logits.dims2()?;
    if batch != labels.len() {
        return Err(NnError::LabelCount {
            logits: batch,
            labels: labels.len(),
        });
    }
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (row, &y) in grad.data_mut().chunks_exact_mut(classes).zip(labels) {
        if y >= classes {
            return Err(NnError::LabelOutOfRange { label: y, classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_z - row[y];
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= batch as f64);
    }
    let loss = total / batch as f64;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok((loss, grad))
}
