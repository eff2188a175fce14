use rand::RngCore;

use super::conv::conv_output_len;
use super::{LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::Tensor;

/// Max pooling over `B×H×W×C` images (square window) or `B×L×C` sequences.
///
/// Ties resolve to the first maximum in row-major window order, and the
/// backward pass routes each output gradient to that position.
#[derive(Debug, Clone)]
pub struct MaxPool {
    window: usize,
    stride: usize,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(NnError::Hyper {
                layer: "maxpool",
                reason: format!("window {window} and stride {stride} must be positive"),
            });
        }
        Ok(MaxPool { window, stride })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Window and stride per spatial axis for an input of the given rank.
    fn geometry(&self, shape: &[usize]) -> Result<([usize; 4], [usize; 2], [usize; 2])> {
        match *shape {
            [b, h, w, c] => Ok(([b, h, w, c], [self.window; 2], [self.stride; 2])),
            [b, l, c] => Ok(([b, 1, l, c], [1, self.window], [1, self.stride])),
            _ => Err(NnError::InputShape {
                layer: "maxpool",
                expected: "B×H×W×C or B×L×C".into(),
                actual: shape.to_vec(),
            }),
        }
    }
}

impl LayerOps for MaxPool {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        let ([batch, h, w, c], [wh, ww], [sh, sw]) = self.geometry(x.shape())?;
        let too_large = |window, extent| NnError::WindowTooLarge {
            layer: "maxpool",
            window,
            extent,
        };
        let out_h = conv_output_len(h, wh, sh).ok_or_else(|| too_large(wh, h))?;
        let out_w = conv_output_len(w, ww, sw).ok_or_else(|| too_large(ww, w))?;
        let src = x.data();
        let mut out = Vec::with_capacity(batch * out_h * out_w * c);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..batch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let idx = ((b * h + oy * sh + dy) * w + ox * sw + dx) * c + ch;
                                if best_idx == usize::MAX || src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let shape = if x.rank() == 4 {
            vec![batch, out_h, out_w, c]
        } else {
            vec![batch, out_w, c]
        };
        Ok((
            Tensor::from_values(&shape, out)?,
            LayerState::Pool {
                argmax,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Pool { argmax, input_shape } = state else {
            return Err(NnError::StateMismatch { layer: "maxpool" });
        };
        if !need_input_grad {
            return Ok(None);
        }
        if grad.len() != argmax.len() {
            return Err(NnError::InputShape {
                layer: "maxpool",
                expected: format!("gradient with {} elements", argmax.len()),
                actual: grad.shape().to_vec(),
            });
        }
        let mut dx = vec![0.0; input_shape.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad.data()) {
            dx[idx] += g;
        }
        Ok(Some(Tensor::from_values(&input_shape, dx)?))
    }
}

/// Collapses every axis after the batch axis.
#[derive(Debug, Clone, Default)]
pub struct Flatten;

impl LayerOps for Flatten {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        let batch = *x.shape().first().ok_or(NnError::InputShape {
            layer: "flatten",
            expected: "batch axis".into(),
            actual: Vec::new(),
        })?;
        let features = x.len() / batch;
        Ok((x.clone().reshape(&[batch, features])?, LayerState::Shape(x.shape().to_vec())))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Shape(shape) = state else {
            return Err(NnError::StateMismatch { layer: "flatten" });
        };
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(grad.clone().reshape(&shape)?))
    }
}
