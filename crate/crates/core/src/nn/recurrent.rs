//! LSTM and GRU layers unrolled over the full sequence, trained with full
//! backpropagation through time.
//!
//! LSTM gates follow the concatenated-input form
//!
//! ```text
//! i = σ(W_i [x, h] + b_i)        C̃ = tanh(W_c [x, h] + b_c)
//! f = σ(W_f [x, h] + b_f)        C  = i ∘ C̃ + f ∘ C_prev
//! o = σ(W_o [x, h] + b_o)        h  = o ∘ tanh(C)
//! ```
//!
//! with the four gate matrices fused into one `(I+H) × 4H` kernel whose
//! column blocks are ordered `[i | C̃ | f | o]`.
//!
//! GRU uses separate input and recurrent weights:
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)     r = σ(W_r x + U_r h + b_r)
//! h' = z ∘ h + (1 - z) ∘ tanh(W_h x + U_h (r ∘ h) + b_h)
//! ```

use rand::RngCore;

use super::activation::sigmoid_scalar;
use super::{expect_rank, glorot_uniform, LayerOps, LayerState, Mode, NnError, Result};
use crate::tensor::{gemm, Tensor};

fn hyper_check(layer: &'static str, inputs: usize, units: usize) -> Result<()> {
    if inputs == 0 || units == 0 {
        return Err(NnError::Hyper {
            layer,
            reason: format!("input width {inputs} and units {units} must be positive"),
        });
    }
    Ok(())
}

fn check_shape(layer: &'static str, t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if t.shape() != expected {
        return Err(NnError::InputShape {
            layer,
            expected: format!("{what} {expected:?}"),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Slice timestep `t` out of a `B×T×F` buffer as a `B×F` tensor.
fn timestep(x: &Tensor, t: usize) -> Result<Tensor> {
    let &[batch, steps, features] = x.shape() else {
        unreachable!("callers validate rank 3")
    };
    let mut out = Vec::with_capacity(batch * features);
    for b in 0..batch {
        let start = (b * steps + t) * features;
        out.extend_from_slice(&x.data()[start..start + features]);
    }
    Ok(Tensor::from_values(&[batch, features], out)?)
}

/// Gradient for timestep `t` of the layer output, or `None` when the layer
/// only emits its final state and `t` is not the last step.
fn output_grad_at(grad: &[f64], batch: usize, steps: usize, units: usize, t: usize, seq: bool) -> Option<Vec<f64>> {
    if seq {
        let mut out = Vec::with_capacity(batch * units);
        for b in 0..batch {
            let start = (b * steps + t) * units;
            out.extend_from_slice(&grad[start..start + units]);
        }
        Some(out)
    } else if t + 1 == steps {
        Some(grad.to_vec())
    } else {
        None
    }
}

fn column_sums_into(acc: &mut [f64], rows: &[f64]) {
    let width = acc.len();
    for row in rows.chunks_exact(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn stack_outputs(outputs: Vec<Tensor>, batch: usize, units: usize, seq: bool) -> Result<Tensor> {
    if !seq {
        return Ok(outputs.into_iter().last().expect("at least one timestep"));
    }
    let steps = outputs.len();
    let mut data = vec![0.0; batch * steps * units];
    for (t, h) in outputs.iter().enumerate() {
        for b in 0..batch {
            let dst = (b * steps + t) * units;
            data[dst..dst + units].copy_from_slice(&h.data()[b * units..(b + 1) * units]);
        }
    }
    Ok(Tensor::from_values(&[batch, steps, units], data)?)
}

/// Per-timestep LSTM values kept for the backward pass. All tensors are `B×H`
/// except `concat`, which is the `B×(I+H)` gate input `[x_t, h_{t-1}]`.
#[derive(Debug, Clone)]
pub struct LstmGateCache {
    pub concat: Tensor,
    pub input_gate: Tensor,
    pub candidate: Tensor,
    pub forget_gate: Tensor,
    pub output_gate: Tensor,
    pub cell_prev: Tensor,
    pub cell: Tensor,
    pub tanh_cell: Tensor,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    inputs: usize,
    units: usize,
    return_sequences: bool,
    kernel: Tensor,
    bias: Tensor,
    grad_kernel: Tensor,
    grad_bias: Tensor,
}

impl Lstm {
    /// Glorot-initialized kernel, zero biases except the forget gate at 1.
    pub fn new(inputs: usize, units: usize, return_sequences: bool, rng: &mut dyn RngCore) -> Result<Self> {
        hyper_check("lstm", inputs, units)?;
        let kernel = glorot_uniform(&[inputs + units, 4 * units], inputs + units, 4 * units, rng)?;
        let mut bias = Tensor::zeros(&[4 * units])?;
        bias.data_mut()[2 * units..3 * units].iter_mut().for_each(|v| *v = 1.0);
        Self::from_params(inputs, units, return_sequences, kernel, bias)
    }

    pub fn from_params(inputs: usize, units: usize, return_sequences: bool, kernel: Tensor, bias: Tensor) -> Result<Self> {
        hyper_check("lstm", inputs, units)?;
        check_shape("lstm", &kernel, &[inputs + units, 4 * units], "kernel")?;
        check_shape("lstm", &bias, &[4 * units], "bias")?;
        Ok(Lstm {
            inputs,
            units,
            return_sequences,
            grad_kernel: Tensor::zeros(kernel.shape())?,
            grad_bias: Tensor::zeros(bias.shape())?,
            kernel,
            bias,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// One LSTM step on a `B×I` input with `B×H` previous hidden and cell state.
    pub fn step(&self, x_t: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor, LstmGateCache)> {
        let (i_w, h) = (self.inputs, self.units);
        let batch = x_t.shape().first().copied().unwrap_or(0);
        check_shape("lstm", x_t, &[batch, i_w], "step input")?;
        check_shape("lstm", h_prev, &[batch, h], "previous hidden state")?;
        check_shape("lstm", c_prev, &[batch, h], "previous cell state")?;

        let width = i_w + h;
        let mut concat = Vec::with_capacity(batch * width);
        for b in 0..batch {
            concat.extend_from_slice(&x_t.data()[b * i_w..(b + 1) * i_w]);
            concat.extend_from_slice(&h_prev.data()[b * h..(b + 1) * h]);
        }
        let mut z = vec![0.0; batch * 4 * h];
        gemm(batch, width, 4 * h, &concat, false, self.kernel.data(), false, &mut z, false);

        let n = batch * h;
        let (mut ig, mut cand, mut fg, mut og) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let (mut cell, mut tanh_cell, mut hidden) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let bias = self.bias.data();
        for b in 0..batch {
            let zr = &z[b * 4 * h..(b + 1) * 4 * h];
            for j in 0..h {
                let k = b * h + j;
                ig[k] = sigmoid_scalar(zr[j] + bias[j]);
                cand[k] = (zr[h + j] + bias[h + j]).tanh();
                fg[k] = sigmoid_scalar(zr[2 * h + j] + bias[2 * h + j]);
                og[k] = sigmoid_scalar(zr[3 * h + j] + bias[3 * h + j]);
                cell[k] = ig[k] * cand[k] + fg[k] * c_prev.data()[k];
                tanh_cell[k] = cell[k].tanh();
                hidden[k] = og[k] * tanh_cell[k];
            }
        }
        let bh = [batch, h];
        let cell = Tensor::from_values(&bh, cell)?;
        let cache = LstmGateCache {
            concat: Tensor::from_values(&[batch, width], concat)?,
            input_gate: Tensor::from_values(&bh, ig)?,
            candidate: Tensor::from_values(&bh, cand)?,
            forget_gate: Tensor::from_values(&bh, fg)?,
            output_gate: Tensor::from_values(&bh, og)?,
            cell_prev: c_prev.clone(),
            cell: cell.clone(),
            tanh_cell: Tensor::from_values(&bh, tanh_cell)?,
        };
        Ok((Tensor::from_values(&bh, hidden)?, cell, cache))
    }
}

impl LayerOps for Lstm {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("lstm", x, 3, "B×T×I")?;
        let &[batch, steps, features] = x.shape() else { unreachable!() };
        if features != self.inputs {
            return Err(NnError::InputShape {
                layer: "lstm",
                expected: format!("B×T×{}", self.inputs),
                actual: x.shape().to_vec(),
            });
        }
        let mut h = Tensor::zeros(&[batch, self.units])?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let (h_next, c_next, cache) = self.step(&timestep(x, t)?, &h, &c)?;
            h = h_next;
            c = c_next;
            if self.return_sequences || t + 1 == steps {
                outputs.push(h.clone());
            }
            caches.push(cache);
        }
        let y = stack_outputs(outputs, batch, self.units, self.return_sequences)?;
        Ok((
            y,
            LayerState::Lstm {
                steps: caches,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Lstm { steps: caches, input_shape } = state else {
            return Err(NnError::StateMismatch { layer: "lstm" });
        };
        let &[batch, steps, i_w] = &input_shape[..] else {
            return Err(NnError::StateMismatch { layer: "lstm" });
        };
        let h = self.units;
        let expected = if self.return_sequences {
            vec![batch, steps, h]
        } else {
            vec![batch, h]
        };
        check_shape("lstm", grad, &expected, "output gradient")?;

        let width = i_w + h;
        self.grad_kernel.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut dx = vec![0.0; batch * steps * i_w];
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];
        let mut dz = vec![0.0; batch * 4 * h];
        let mut dconcat = vec![0.0; batch * width];

        for (t, cache) in caches.iter().enumerate().rev() {
            let mut dh = dh_next.clone();
            if let Some(g) = output_grad_at(grad.data(), batch, steps, h, t, self.return_sequences) {
                dh.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let (ig, cand, fg, og) = (
                cache.input_gate.data(),
                cache.candidate.data(),
                cache.forget_gate.data(),
                cache.output_gate.data(),
            );
            let (cp, tc) = (cache.cell_prev.data(), cache.tanh_cell.data());
            for b in 0..batch {
                for j in 0..h {
                    let k = b * h + j;
                    let d_o = dh[k] * tc[k];
                    let dc = dh[k] * og[k] * (1.0 - tc[k] * tc[k]) + dc_next[k];
                    let d_i = dc * cand[k];
                    let d_cand = dc * ig[k];
                    let d_f = dc * cp[k];
                    dc_next[k] = dc * fg[k];
                    let row = b * 4 * h;
                    dz[row + j] = d_i * ig[k] * (1.0 - ig[k]);
                    dz[row + h + j] = d_cand * (1.0 - cand[k] * cand[k]);
                    dz[row + 2 * h + j] = d_f * fg[k] * (1.0 - fg[k]);
                    dz[row + 3 * h + j] = d_o * og[k] * (1.0 - og[k]);
                }
            }
            gemm(
                width,
                batch,
                4 * h,
                cache.concat.data(),
                true,
                &dz,
                false,
                self.grad_kernel.data_mut(),
                true,
            );
            column_sums_into(self.grad_bias.data_mut(), &dz);
            gemm(batch, 4 * h, width, &dz, false, self.kernel.data(), true, &mut dconcat, false);
            for b in 0..batch {
                let row = &dconcat[b * width..(b + 1) * width];
                let dst = (b * steps + t) * i_w;
                dx[dst..dst + i_w].copy_from_slice(&row[..i_w]);
                dh_next[b * h..(b + 1) * h].copy_from_slice(&row[i_w..]);
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(Tensor::from_values(&input_shape, dx)?))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        vec![(&mut self.kernel, &self.grad_kernel), (&mut self.bias, &self.grad_bias)]
    }
}

/// Per-timestep GRU values kept for the backward pass (all `B×H` except
/// `input`, which is `B×I`).
#[derive(Debug, Clone)]
pub struct GruGateCache {
    pub input: Tensor,
    pub hidden_prev: Tensor,
    pub update_gate: Tensor,
    pub reset_gate: Tensor,
    pub candidate: Tensor,
    pub reset_hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct Gru {
    inputs: usize,
    units: usize,
    return_sequences: bool,
    /// `I × 3H`, column blocks `[z | r | h]`.
    kernel: Tensor,
    /// `H × 2H`, column blocks `[z | r]`.
    recurrent: Tensor,
    /// `H × H`, applied to `r ∘ h_prev`.
    recurrent_candidate: Tensor,
    /// `3H`, blocks `[z | r | h]`.
    bias: Tensor,
    grad_kernel: Tensor,
    grad_recurrent: Tensor,
    grad_recurrent_candidate: Tensor,
    grad_bias: Tensor,
}

impl Gru {
    pub fn new(inputs: usize, units: usize, return_sequences: bool, rng: &mut dyn RngCore) -> Result<Self> {
        hyper_check("gru", inputs, units)?;
        let kernel = glorot_uniform(&[inputs, 3 * units], inputs, 3 * units, rng)?;
        let recurrent = glorot_uniform(&[units, 2 * units], units, 2 * units, rng)?;
        let recurrent_candidate = glorot_uniform(&[units, units], units, units, rng)?;
        Self::from_params(
            inputs,
            units,
            return_sequences,
            kernel,
            recurrent,
            recurrent_candidate,
            Tensor::zeros(&[3 * units])?,
        )
    }

    pub fn from_params(
        inputs: usize,
        units: usize,
        return_sequences: bool,
        kernel: Tensor,
        recurrent: Tensor,
        recurrent_candidate: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        hyper_check("gru", inputs, units)?;
        check_shape("gru", &kernel, &[inputs, 3 * units], "kernel")?;
        check_shape("gru", &recurrent, &[units, 2 * units], "recurrent kernel")?;
        check_shape("gru", &recurrent_candidate, &[units, units], "candidate recurrent kernel")?;
        check_shape("gru", &bias, &[3 * units], "bias")?;
        Ok(Gru {
            inputs,
            units,
            return_sequences,
            grad_kernel: Tensor::zeros(kernel.shape())?,
            grad_recurrent: Tensor::zeros(recurrent.shape())?,
            grad_recurrent_candidate: Tensor::zeros(recurrent_candidate.shape())?,
            grad_bias: Tensor::zeros(bias.shape())?,
            kernel,
            recurrent,
            recurrent_candidate,
            bias,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    /// One GRU step on a `B×I` input with a `B×H` previous hidden state.
    pub fn step(&self, x_t: &Tensor, h_prev: &Tensor) -> Result<(Tensor, GruGateCache)> {
        let (i_w, h) = (self.inputs, self.units);
        let batch = x_t.shape().first().copied().unwrap_or(0);
        check_shape("gru", x_t, &[batch, i_w], "step input")?;
        check_shape("gru", h_prev, &[batch, h], "previous hidden state")?;

        let mut xw = vec![0.0; batch * 3 * h];
        gemm(batch, i_w, 3 * h, x_t.data(), false, self.kernel.data(), false, &mut xw, false);
        let mut hu = vec![0.0; batch * 2 * h];
        gemm(batch, h, 2 * h, h_prev.data(), false, self.recurrent.data(), false, &mut hu, false);

        let n = batch * h;
        let (mut z, mut r, mut rh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let bias = self.bias.data();
        let hp = h_prev.data();
        for b in 0..batch {
            for j in 0..h {
                let k = b * h + j;
                z[k] = sigmoid_scalar(xw[b * 3 * h + j] + hu[b * 2 * h + j] + bias[j]);
                r[k] = sigmoid_scalar(xw[b * 3 * h + h + j] + hu[b * 2 * h + h + j] + bias[h + j]);
                rh[k] = r[k] * hp[k];
            }
        }
        let mut cu = vec![0.0; n];
        gemm(batch, h, h, &rh, false, self.recurrent_candidate.data(), false, &mut cu, false);
        let (mut cand, mut hidden) = (vec![0.0; n], vec![0.0; n]);
        for b in 0..batch {
            for j in 0..h {
                let k = b * h + j;
                cand[k] = (xw[b * 3 * h + 2 * h + j] + cu[k] + bias[2 * h + j]).tanh();
                hidden[k] = z[k] * hp[k] + (1.0 - z[k]) * cand[k];
            }
        }
        let bh = [batch, h];
        let cache = GruGateCache {
            input: x_t.clone(),
            hidden_prev: h_prev.clone(),
            update_gate: Tensor::from_values(&bh, z)?,
            reset_gate: Tensor::from_values(&bh, r)?,
            candidate: Tensor::from_values(&bh, cand)?,
            reset_hidden: Tensor::from_values(&bh, rh)?,
        };
        Ok((Tensor::from_values(&bh, hidden)?, cache))
    }
}

impl LayerOps for Gru {
    fn forward(&self, x: &Tensor, _mode: Mode, _rng: &mut dyn RngCore) -> Result<(Tensor, LayerState)> {
        expect_rank("gru", x, 3, "B×T×I")?;
        let &[batch, steps, features] = x.shape() else { unreachable!() };
        if features != self.inputs {
            return Err(NnError::InputShape {
                layer: "gru",
                expected: format!("B×T×{}", self.inputs),
                actual: x.shape().to_vec(),
            });
        }
        let mut h = Tensor::zeros(&[batch, self.units])?;
        let mut outputs = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let (h_next, cache) = self.step(&timestep(x, t)?, &h)?;
            h = h_next;
            if self.return_sequences || t + 1 == steps {
                outputs.push(h.clone());
            }
            caches.push(cache);
        }
        let y = stack_outputs(outputs, batch, self.units, self.return_sequences)?;
        Ok((
            y,
            LayerState::Gru {
                steps: caches,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, grad: &Tensor, state: LayerState, need_input_grad: bool) -> Result<Option<Tensor>> {
        let LayerState::Gru { steps: caches, input_shape } = state else {
            return Err(NnError::StateMismatch { layer: "gru" });
        };
        let &[batch, steps, i_w] = &input_shape[..] else {
            return Err(NnError::StateMismatch { layer: "gru" });
        };
        let h = self.units;
        let expected = if self.return_sequences {
            vec![batch, steps, h]
        } else {
            vec![batch, h]
        };
        check_shape("gru", grad, &expected, "output gradient")?;

        self.grad_kernel.fill(0.0);
        self.grad_recurrent.fill(0.0);
        self.grad_recurrent_candidate.fill(0.0);
        self.grad_bias.fill(0.0);
        let n = batch * h;
        let mut dx = vec![0.0; batch * steps * i_w];
        let mut dh_next = vec![0.0; n];
        let mut da_cand = vec![0.0; n];
        let mut d_rh = vec![0.0; n];
        let mut d_hu = vec![0.0; batch * 2 * h];
        let mut d_xw = vec![0.0; batch * 3 * h];
        let mut dx_t = vec![0.0; batch * i_w];

        for (t, cache) in caches.iter().enumerate().rev() {
            let mut dh = std::mem::replace(&mut dh_next, vec![0.0; n]);
            if let Some(g) = output_grad_at(grad.data(), batch, steps, h, t, self.return_sequences) {
                dh.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let (z, r, cand) = (
                cache.update_gate.data(),
                cache.reset_gate.data(),
                cache.candidate.data(),
            );
            let hp = cache.hidden_prev.data();
            let mut dz = vec![0.0; n];
            for k in 0..n {
                dz[k] = dh[k] * (hp[k] - cand[k]);
                dh_next[k] = dh[k] * z[k];
                da_cand[k] = dh[k] * (1.0 - z[k]) * (1.0 - cand[k] * cand[k]);
            }
            gemm(
                h,
                batch,
                h,
                cache.reset_hidden.data(),
                true,
                &da_cand,
                false,
                self.grad_recurrent_candidate.data_mut(),
                true,
            );
            gemm(batch, h, h, &da_cand, false, self.recurrent_candidate.data(), true, &mut d_rh, false);
            for b in 0..batch {
                for j in 0..h {
                    let k = b * h + j;
                    let dr = d_rh[k] * hp[k];
                    dh_next[k] += d_rh[k] * r[k];
                    let da_z = dz[k] * z[k] * (1.0 - z[k]);
                    let da_r = dr * r[k] * (1.0 - r[k]);
                    d_hu[b * 2 * h + j] = da_z;
                    d_hu[b * 2 * h + h + j] = da_r;
                    d_xw[b * 3 * h + j] = da_z;
                    d_xw[b * 3 * h + h + j] = da_r;
                    d_xw[b * 3 * h + 2 * h + j] = da_cand[k];
                }
            }
            gemm(h, batch, 2 * h, hp, true, &d_hu, false, self.grad_recurrent.data_mut(), true);
            // dh_prev += d_hu · Uᵀ
            gemm(batch, 2 * h, h, &d_hu, false, self.recurrent.data(), true, &mut dh_next, true);
            gemm(
                i_w,
                batch,
                3 * h,
                cache.input.data(),
                true,
                &d_xw,
                false,
                self.grad_kernel.data_mut(),
                true,
            );
            column_sums_into(self.grad_bias.data_mut(), &d_xw);
            if need_input_grad {
                gemm(batch, 3 * h, i_w, &d_xw, false, self.kernel.data(), true, &mut dx_t, false);
                for b in 0..batch {
                    let dst = (b * steps + t) * i_w;
                    dx[dst..dst + i_w].copy_from_slice(&dx_t[b * i_w..(b + 1) * i_w]);
                }
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        Ok(Some(Tensor::from_values(&input_shape, dx)?))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.recurrent, &self.recurrent_candidate, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.kernel,
            &mut self.recurrent,
            &mut self.recurrent_candidate,
            &mut self.bias,
        ]
    }

    fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        vec![
            (&mut self.kernel, &self.grad_kernel),
            (&mut self.recurrent, &self.grad_recurrent),
            (&mut self.recurrent_candidate, &self.grad_recurrent_candidate),
            (&mut self.bias, &self.grad_bias),
        ]
    }
}
