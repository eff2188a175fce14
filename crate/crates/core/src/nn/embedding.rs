use rand::RngCore;

use super::{expect_rank, glorot_uniform, LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::Tensor;

/// Token-index lookup table mapping `B×L` indices to `B×L×D` vectors.
///
/// Index 0 is the padding/unknown token: its row starts at zero and never
/// receives a gradient, so it stays zero for the life of the model.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    grad_table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if vocab < 2 || dim == 0 {
            return Err(NnError::Hyper {
                layer: "embedding",
                reason: format!("need at least 2 tokens and a positive width, got {vocab}×{dim}"),
            });
        }
        let mut table = glorot_uniform(&[vocab, dim], vocab, dim, rng)?;
        table.data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
        Self::from_table(table)
    }

    /// Uses `table` (`V×D`) as-is, e.g. rows copied from pretrained vectors.
    pub fn from_table(table: Tensor) -> Result<Self> {
        table.dims2()?;
        Ok(Embedding {
            grad_table: Tensor::zeros(table.shape())?,
            table,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

impl LayerOps for Embedding {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("embedding", x, 2, "B×L token indices")?;
        let (vocab, dim) = (self.vocab(), self.dim());
        let mut indices = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len() * dim);
        for &raw in x.data() {
            if raw < 0.0 || raw.fract() != 0.0 || raw >= vocab as f64 {
                return Err(NnError::TokenOutOfRange {
                    layer: "embedding",
                    index: raw,
                    vocab,
                });
            }
            let idx = raw as usize;
            indices.push(idx);
            out.extend_from_slice(&self.table.data()[idx * dim..(idx + 1) * dim]);
        }
        let shape = [x.shape()[0], x.shape()[1], dim];
        Ok((
            Tensor::from_values(&shape, out)?,
            LayerState::Tokens {
                indices,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Tokens { indices, input_shape } = state else {
            return Err(NnError::StateMismatch { layer: "embedding" });
        };
        let dim = self.dim();
        if grad.len() != indices.len() * dim {
            return Err(NnError::InputShape {
                layer: "embedding",
                expected: format!("gradient with {} elements", indices.len() * dim),
                actual: grad.shape().to_vec(),
            });
        }
        let gt = self.grad_table.data_mut();
        gt.iter_mut().for_each(|v| *v = 0.0);
        for (&idx, g) in indices.iter().zip(grad.data().chunks_exact(dim)) {
            if idx == 0 {
                continue;
            }
            for (t, &gv) in gt[idx * dim..(idx + 1) * dim].iter_mut().zip(g) {
                *t += gv;
            }
        }
        // token indices are not differentiable
        Ok(need_input_grad.then(|| Tensor::zeros(&input_shape)).transpose()?)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.table]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        vec![(&mut self.table, &self.grad_table)]
    }
}
