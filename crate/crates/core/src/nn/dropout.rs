use rand::{Rng, RngCore};

use super::{LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::Tensor;

/// Inverted dropout: in training each element survives with probability
/// `1 - p` and is scaled by `1/(1 - p)`; evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Hyper {
                layer: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Applies dropout to `x` directly.
pub fn dropout_apply(x: &Tensor, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
    Ok(Dropout::new(rate)?.forward(x, mode, rng)?.0)
}

impl LayerOps for Dropout {
    fn forward(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok((x.clone(), LayerState::Mask(None)));
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() >= self.rate { scale } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok((Tensor::from_values(x.shape(), data)?, LayerState::Mask(Some(mask))))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Mask(mask) = state else {
            return Err(NnError::StateMismatch { layer: "dropout" });
        };
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(match mask {
            None => grad.clone(),
            Some(mask) => {
                let data = grad.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
                Tensor::from_values(grad.shape(), data)?
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_is_exact_identity() {
        let x = Tensor::from_values(&[4], vec![0.1, -3.0, 7.5, 1e-300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout_apply(&x, 0.4, Mode::Eval, &mut rng).unwrap(), x);
    }

    #[test]
    fn zero_rate_is_identity_in_training() {
        let x = Tensor::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout_apply(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    }

    #[test]
    fn rejects_rate_of_one() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }

    #[test]
    fn inverted_scaling_preserves_the_mean() {
        // Monte-Carlo expectation over 1e5 masked elements of an all-ones input
        let x = Tensor::ones(&[100_000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = dropout_apply(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
