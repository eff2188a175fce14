use rand::RngCore;

use super::{expect_rank, glorot_uniform, LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::{gemm, Tensor};

/// Fully connected layer `y = xW + b` with `W` stored `inputs × units`.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    grad_weight: Tensor,
    grad_bias: Tensor,
}

/// Inputs with fewer nonzeros than this fraction take the sparse path
/// (TF-IDF rows are typically well under 1% dense).
const SPARSE_DENSITY: f64 = 0.1;

impl Dense {
    pub fn new(inputs: usize, units: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if inputs == 0 || units == 0 {
            return Err(NnError::Hyper {
                layer: "dense",
                reason: format!("dimensions must be positive, got {inputs}×{units}"),
            });
        }
        let weight = glorot_uniform(&[inputs, units], inputs, units, rng)?;
        Self::from_params(weight, Tensor::zeros(&[units])?)
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [inputs, units] = weight.dims2()?;
        if bias.shape() != [units] {
            return Err(NnError::Hyper {
                layer: "dense",
                reason: format!("bias shape {:?} does not match {units} units", bias.shape()),
            });
        }
        Ok(Dense {
            grad_weight: Tensor::zeros(&[inputs, units])?,
            grad_bias: Tensor::zeros(&[units])?,
            weight,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn grad_weight(&self) -> &Tensor {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &Tensor {
        &self.grad_bias
    }
}

fn is_sparse(x: &[f64]) -> bool {
    let nnz = x.iter().filter(|&&v| v != 0.0).count();
    (nnz as f64) < SPARSE_DENSITY * x.len() as f64
}

impl LayerOps for Dense {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("dense", x, 2, "B×features")?;
        let (inputs, units) = (self.inputs(), self.units());
        let batch = x.shape()[0];
        if x.shape()[1] != inputs {
            return Err(NnError::InputShape {
                layer: "dense",
                expected: format!("B×{inputs}"),
                actual: x.shape().to_vec(),
            });
        }
        let w = self.weight.data();
        let mut out = vec![0.0; batch * units];
        if is_sparse(x.data()) {
            for (xr, or) in x.data().chunks_exact(inputs).zip(out.chunks_exact_mut(units)) {
                for (p, &v) in xr.iter().enumerate() {
                    if v != 0.0 {
                        for (o, &wv) in or.iter_mut().zip(&w[p * units..(p + 1) * units]) {
                            *o += v * wv;
                        }
                    }
                }
            }
        } else {
            gemm(batch, inputs, units, x.data(), false, w, false, &mut out, false);
        }
        for row in out.chunks_exact_mut(units) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok((Tensor::from_values(&[batch, units], out)?, LayerState::Input(x.clone())))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Input(x) = state else {
            return Err(NnError::StateMismatch { layer: "dense" });
        };
        let (inputs, units) = (self.inputs(), self.units());
        let batch = x.shape()[0];
        if grad.shape() != [batch, units] {
            return Err(NnError::InputShape {
                layer: "dense",
                expected: format!("gradient {batch}×{units}"),
                actual: grad.shape().to_vec(),
            });
        }
        let gw = self.grad_weight.data_mut();
        if is_sparse(x.data()) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            for (xr, gr) in x.data().chunks_exact(inputs).zip(grad.data().chunks_exact(units)) {
                for (p, &v) in xr.iter().enumerate() {
                    if v != 0.0 {
                        for (o, &g) in gw[p * units..(p + 1) * units].iter_mut().zip(gr) {
                            *o += v * g;
                        }
                    }
                }
            }
        } else {
            gemm(inputs, batch, units, x.data(), true, grad.data(), false, gw, false);
        }
        let gb = self.grad_bias.data_mut();
        gb.iter_mut().for_each(|v| *v = 0.0);
        for row in grad.data().chunks_exact(units) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(grad.matmul_nt(&self.weight)?))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        vec![(&mut self.weight, &self.grad_weight), (&mut self.bias, &self.grad_bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let eye = Tensor::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = Dense::from_params(eye, Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = Tensor::from_values(&[3, 2], vec![0.5, -1.0, 2.0, 3.0, -4.0, 0.25]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let bias = Tensor::from_values(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let layer = Dense::from_params(Tensor::zeros(&[4, 3]).unwrap(), bias.clone()).unwrap();
        let x = Tensor::from_values(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval, &mut rng()).unwrap();
        for row in y.rows().unwrap() {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let mut r = rng();
        let mut layer = Dense::new(50, 4, &mut r).unwrap();
        let mut values = vec![0.0; 2 * 50];
        values[3] = 0.7;
        values[77] = -1.25;
        let sparse = Tensor::from_values(&[2, 50], values).unwrap();
        let (y_sparse, state) = layer.forward(&sparse, Mode::Eval, &mut r).unwrap();
        let g = Tensor::ones(&[2, 4]).unwrap();
        layer.backward(&g, state, false).unwrap();
        let gw_sparse = layer.grad_weight().clone();

        let y_dense = sparse.matmul(layer.weight()).unwrap();
        for (a, b) in y_sparse.data().iter().zip(y_dense.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let gw_dense = sparse.matmul_tn(&g).unwrap();
        for (a, b) in gw_sparse.data().iter().zip(gw_dense.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let layer = Dense::new(3, 2, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(
            layer.forward(&x, Mode::Eval, &mut rng()),
            Err(NnError::InputShape { .. })
        ));
    }
}
