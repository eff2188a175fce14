//! Valid (unpadded) cross-correlation layers, computed with im2col.

use rand::RngCore;

use super::{expect_rank, glorot_uniform, LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::{gemm, Tensor};

/// Output extent of a valid window sweep: `floor((n - k) / s) + 1`.
pub fn conv_output_len(n: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || window > n {
        None
    } else {
        Some((n - window) / stride + 1)
    }
}

/// Shared 2-D machinery. Weights are `(kh·kw·C) × F` with rows ordered
/// `(dy, dx, c)`, matching the im2col column layout.
#[derive(Debug, Clone)]
struct ConvCore {
    name: &'static str,
    kernel: [usize; 2],
    stride: [usize; 2],
    channels: usize,
    filters: usize,
    weight: Tensor,
    bias: Tensor,
    grad_weight: Tensor,
    grad_bias: Tensor,
}

impl ConvCore {
    fn new(
        name: &'static str,
        kernel: [usize; 2],
        stride: [usize; 2],
        channels: usize,
        filters: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) || channels == 0 || filters == 0 {
            return Err(NnError::Hyper {
                layer: name,
                reason: format!(
                    "kernel {kernel:?}, stride {stride:?}, channels {channels}, filters {filters} must all be positive"
                ),
            });
        }
        let taps = kernel[0] * kernel[1];
        let weight = glorot_uniform(&[taps * channels, filters], taps * channels, taps * filters, rng)?;
        Ok(ConvCore {
            name,
            kernel,
            stride,
            channels,
            filters,
            grad_weight: Tensor::zeros(weight.shape())?,
            grad_bias: Tensor::zeros(&[filters])?,
            bias: Tensor::zeros(&[filters])?,
            weight,
        })
    }

    fn set_params(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != self.weight.shape() || bias.shape() != self.bias.shape() {
            return Err(NnError::Hyper {
                layer: self.name,
                reason: format!(
                    "parameter shapes {:?}/{:?} do not match {:?}/{:?}",
                    weight.shape(),
                    bias.shape(),
                    self.weight.shape(),
                    self.bias.shape()
                ),
            });
        }
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    fn patch_len(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.channels
    }

    /// `x` is `B×H×W×C`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerState)> {
        let &[batch, h, w, c] = x.shape() else {
            unreachable!("callers pass rank-4 input")
        };
        if c != self.channels {
            return Err(NnError::InputShape {
                layer: self.name,
                expected: format!("{} input channels", self.channels),
                actual: x.shape().to_vec(),
            });
        }
        let out_h = conv_output_len(h, self.kernel[0], self.stride[0]).ok_or(NnError::WindowTooLarge {
            layer: self.name,
            window: self.kernel[0],
            extent: h,
        })?;
        let out_w = conv_output_len(w, self.kernel[1], self.stride[1]).ok_or(NnError::WindowTooLarge {
            layer: self.name,
            window: self.kernel[1],
            extent: w,
        })?;
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let patch = self.patch_len();
        let run = kw * c;
        let rows = batch * out_h * out_w;
        let mut cols = vec![0.0; rows * patch];
        let src = x.data();
        let mut row = 0;
        for b in 0..batch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for dy in 0..kh {
                        let start = ((b * h + oy * sh + dy) * w + ox * sw) * c;
                        dst[dy * run..(dy + 1) * run].copy_from_slice(&src[start..start + run]);
                    }
                    row += 1;
                }
            }
        }
        let f = self.filters;
        let mut out = vec![0.0; rows * f];
        gemm(rows, patch, f, &cols, false, self.weight.data(), false, &mut out, false);
        for r in out.chunks_exact_mut(f) {
            for (o, &bv) in r.iter_mut().zip(self.bias.data()) {
                *o += bv;
            }
        }
        let y = Tensor::from_values(&[batch, out_h, out_w, f], out)?;
        Ok((
            y,
            LayerState::Conv {
                cols,
                input_shape: x.shape().to_vec(),
                out_h,
                out_w,
            },
        ))
    }

    /// `grad` is `B×out_h×out_w×F`; returns `dx` in the 4-D input shape.
    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Conv {
            cols,
            input_shape,
            out_h,
            out_w,
        } = state
        else {
            return Err(NnError::StateMismatch { layer: self.name });
        };
        let &[batch, h, w, c] = &input_shape[..] else {
            return Err(NnError::StateMismatch { layer: self.name });
        };
        let f = self.filters;
        let rows = batch * out_h * out_w;
        if grad.len() != rows * f {
            return Err(NnError::InputShape {
                layer: self.name,
                expected: format!("gradient {batch}×{out_h}×{out_w}×{f}"),
                actual: grad.shape().to_vec(),
            });
        }
        let patch = self.patch_len();
        gemm(patch, rows, f, &cols, true, grad.data(), false, self.grad_weight.data_mut(), false);
        let gb = self.grad_bias.data_mut();
        gb.iter_mut().for_each(|v| *v = 0.0);
        for r in grad.data().chunks_exact(f) {
            for (b, &g) in gb.iter_mut().zip(r) {
                *b += g;
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dcols = vec![0.0; rows * patch];
        gemm(rows, f, patch, grad.data(), false, self.weight.data(), true, &mut dcols, false);
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let run = kw * c;
        let mut dx = vec![0.0; batch * h * w * c];
        let mut row = 0;
        for b in 0..batch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let srcp = &dcols[row * patch..(row + 1) * patch];
                    for dy in 0..kh {
                        let start = ((b * h + oy * sh + dy) * w + ox * sw) * c;
                        for (d, &s) in dx[start..start + run].iter_mut().zip(&srcp[dy * run..(dy + 1) * run]) {
                            *d += s;
                        }
                    }
                    row += 1;
                }
            }
        }
        Ok(Some(Tensor::from_values(&input_shape, dx)?))
    }
}

/// 2-D convolution over `B×H×W×C` images with a square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    core: ConvCore,
}

impl Conv2d {
    pub fn new(channels: usize, filters: usize, kernel: usize, stride: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Conv2d {
            core: ConvCore::new("conv2d", [kernel, kernel], [stride, stride], channels, filters, rng)?,
        })
    }

    /// Replaces the kernel (`k·k·C × F`) and bias (`F`).
    pub fn with_params(mut self, weight: Tensor, bias: Tensor) -> Result<Self> {
        self.core.set_params(weight, bias)?;
        Ok(self)
    }

    pub fn filters(&self) -> usize {
        self.core.filters
    }
}

impl LayerOps for Conv2d {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("conv2d", x, 4, "B×H×W×C")?;
        self.core.forward(x)
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        self.core.backward(grad, state, need_input_grad)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.core.weight, &self.core.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.core.weight, &mut self.core.bias]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let c = &mut self.core;
        vec![(&mut c.weight, &c.grad_weight), (&mut c.bias, &c.grad_bias)]
    }
}

/// 1-D convolution over `B×L×C` sequences, run as a `1×k` 2-D kernel.
#[derive(Debug, Clone)]
pub struct Conv1d {
    core: ConvCore,
}

impl Conv1d {
    pub fn new(channels: usize, filters: usize, kernel: usize, stride: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(Conv1d {
            core: ConvCore::new("conv1d", [1, kernel], [1, stride], channels, filters, rng)?,
        })
    }

    pub fn with_params(mut self, weight: Tensor, bias: Tensor) -> Result<Self> {
        self.core.set_params(weight, bias)?;
        Ok(self)
    }

    pub fn filters(&self) -> usize {
        self.core.filters
    }
}

impl LayerOps for Conv1d {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("conv1d", x, 3, "B×L×C")?;
        let &[b, l, c] = x.shape() else { unreachable!() };
        let x4 = x.clone().reshape(&[b, 1, l, c])?;
        let (y, state) = self.core.forward(&x4)?;
        let &[_, _, lo, f] = y.shape() else { unreachable!() };
        Ok((y.reshape(&[b, lo, f])?, state))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let dx = self.core.backward(grad, state, need_input_grad)?;
        dx.map(|t| {
            let &[b, _, l, c] = t.shape() else { unreachable!() };
            Ok(t.reshape(&[b, l, c])?)
        })
        .transpose()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.core.weight, &self.core.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.core.weight, &mut self.core.bias]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let c = &mut self.core;
        vec![(&mut c.weight, &c.grad_weight), (&mut c.bias, &c.grad_bias)]
    }
}
