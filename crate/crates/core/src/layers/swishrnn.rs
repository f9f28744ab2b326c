//! The Swish-pooling recurrent block.
//!
//! Two projections of the block input feed a sequential pooling scan and a
//! gate:
//!
//! ```text
//! X1 = X·W1,  X2 = X·W2
//! c[i] = swish(c[i-k] - x1[i]) + x1[i],   c[j] = 0 for j < 0
//! H = ((C + b_c) ⊙ gate(X2 + b_sigma))·W3 + b3
//! ```
//!
//! with `swish(z) = sigmoid(alpha ⊙ z + beta) ⊙ z` and per-channel `alpha`,
//! `beta`. With a step size `k > 1`, row `i` depends on row `i - k`, so the
//! sequence splits into `k` independent chains and only `ceil(l / k)`
//! sequential steps are needed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::params::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};

/// Activation applied to the gate branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    #[default]
    Gelu,
    Sigmoid,
}

#[inline]
pub fn swish<T: Scalar>(x: T, alpha: T, beta: T) -> T {
    sigmoid(alpha * x + beta) * x
}

/// Row-broadcast Swish on the tape, differentiable in `x`, `alpha` and `beta`.
pub fn swish_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul_row(x, alpha)?;
    let shifted = tape.add_row(scaled, beta)?;
    let gate = tape.sigmoid(shifted);
    tape.mul(gate, x)
}

fn check_scan_args<T: Scalar>(width: usize, alpha: &[T], beta: &[T], step: usize) -> Result<()> {
    if step < 1 {
        return Err(Error::Config(format!("scan step size must be >= 1, got {step}")));
    }
    if alpha.len() != width || beta.len() != width {
        return Err(Error::dims("swishrnn_scan", &[width], &[alpha.len(), beta.len()]));
    }
    Ok(())
}

/// One sequence of the forward recurrence. Writes the states into `c` and the
/// gate values `sigmoid(alpha·z + beta)` into `sig` for the backward pass.
///
/// The loop is organized by step: each step updates up to `step` consecutive
/// rows from the `step` rows before them, which is one contiguous slab.
#[allow(clippy::too_many_arguments)]
fn scan_sequence<T: Scalar>(x: &[T], c: &mut [T], sig: &mut [T], width: usize, step: usize, alpha: &[T], beta: &[T]) {
    let rows = x.len() / width;
    let mut start = 0;
    while start < rows {
        let end = (start + step).min(rows);
        let (done, rest) = c.split_at_mut(start * width);
        let cur = &mut rest[..(end - start) * width];
        let xs = &x[start * width..end * width];
        let ss = &mut sig[start * width..end * width];
        let prev = (start >= step).then(|| &done[(start - step) * width..(end - step) * width]);
        for r in 0..end - start {
            let span = r * width..(r + 1) * width;
            let xr = &xs[span.clone()];
            let cr = &mut cur[span.clone()];
            let sr = &mut ss[span.clone()];
            match prev {
                Some(p) => {
                    let pr = &p[span];
                    for j in 0..width {
                        let z = pr[j] - xr[j];
                        let s = sigmoid(alpha[j] * z + beta[j]);
                        sr[j] = s;
                        cr[j] = s * z + xr[j];
                    }
                }
                None => {
                    for j in 0..width {
                        let z = T::zero() - xr[j];
                        let s = sigmoid(alpha[j] * z + beta[j]);
                        sr[j] = s;
                        cr[j] = s * z + xr[j];
                    }
                }
            }
        }
        start = end;
    }
}

/// Runs the recurrence over `x1` (`n·seq_len` rows of `width` channels), one
/// independent sequence per `seq_len` rows. Returns the states and the saved
/// gate values.
pub fn scan_forward<T: Scalar>(
    x1: &[T],
    width: usize,
    seq_len: usize,
    alpha: &[T],
    beta: &[T],
    step: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut c = vec![T::zero(); x1.len()];
    let mut sig = vec![T::zero(); x1.len()];
    scan_forward_into(x1, &mut c, &mut sig, width, seq_len, alpha, beta, step)?;
    Ok((c, sig))
}

/// [`scan_forward`] writing into caller-provided buffers of `x1.len()`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward_into<T: Scalar>(
    x1: &[T],
    c: &mut [T],
    sig: &mut [T],
    width: usize,
    seq_len: usize,
    alpha: &[T],
    beta: &[T],
    step: usize,
) -> Result<()> {
    check_scan_args(width, alpha, beta, step)?;
    if seq_len == 0 || width == 0 || !x1.len().is_multiple_of(seq_len * width) {
        return Err(Error::dims("swishrnn_scan", &[x1.len()], &[seq_len, width]));
    }
    if c.len() != x1.len() || sig.len() != x1.len() {
        return Err(Error::dims("swishrnn_scan", &[x1.len()], &[c.len(), sig.len()]));
    }
    let block = seq_len * width;
    for ((xs, cs), ss) in x1
        .chunks_exact(block)
        .zip(c.chunks_exact_mut(block))
        .zip(sig.chunks_exact_mut(block))
    {
        scan_sequence(xs, cs, ss, width, step, alpha, beta);
    }
    Ok(())
}

/// Gradients of the scan with respect to `x1`, `alpha` and `beta`.
pub struct ScanGrads<T> {
    pub x1: Vec<T>,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

/// Reverse pass of [`scan_forward`]. Rows are visited last to first so every
/// state's gradient is complete (it also receives the contribution flowing
/// back from row `i + step`) before it is propagated.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    x1: &[T],
    c: &[T],
    sig: &[T],
    grad_c: &[T],
    width: usize,
    seq_len: usize,
    alpha: &[T],
    beta: &[T],
    step: usize,
) -> Result<ScanGrads<T>> {
    check_scan_args(width, alpha, beta, step)?;
    let mut gc = grad_c.to_vec();
    let mut gx = vec![T::zero(); x1.len()];
    let mut ga = vec![T::zero(); width];
    let mut gb = vec![T::zero(); width];
    let block = seq_len * width;
    for seq in 0..x1.len() / block {
        let base = seq * block;
        for i in (0..seq_len).rev() {
            let row = base + i * width;
            for j in 0..width {
                let idx = row + j;
                let prev = if i >= step { c[idx - step * width] } else { T::zero() };
                let z = prev - x1[idx];
                let s = sig[idx];
                let ds = s * (T::one() - s);
                let g = gc[idx];
                // c = s·z + x, z = prev - x, s = sigmoid(alpha·z + beta)
                let dc_dz = s + z * ds * alpha[j];
                let gz = g * dc_dz;
                gx[idx] = g - gz;
                if i >= step {
                    gc[idx - step * width] += gz;
                }
                ga[j] += g * z * z * ds;
                gb[j] += g * z * ds;
            }
        }
    }
    Ok(ScanGrads {
        x1: gx,
        alpha: ga,
        beta: gb,
    })
}

/// Single-sequence scan on tensors: `x1` is `l × d'`.
pub fn swishrnn_scan<T: Scalar>(x1: &Tensor<T>, alpha: &Tensor<T>, beta: &Tensor<T>, step: usize) -> Result<Tensor<T>> {
    if x1.rank() != 2 {
        return Err(Error::dims("swishrnn_scan", x1.shape(), alpha.shape()));
    }
    let (rows, width) = x1.matrix_dims();
    let (c, _) = scan_forward(x1.data(), width, rows, alpha.data(), beta.data(), step)?;
    Tensor::new(x1.shape(), c)
}

struct ScanOp<T> {
    seq_len: usize,
    width: usize,
    step: usize,
    sig: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "swishrnn_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let g = scan_backward(
            inputs[0].data(),
            output.data(),
            &self.sig,
            grad_out,
            self.width,
            self.seq_len,
            inputs[1].data(),
            inputs[2].data(),
            self.step,
        )?;
        Ok(vec![Some(g.x1), Some(g.alpha), Some(g.beta)])
    }
}

/// Records the scan on the tape. `x1` holds whole sequences of `seq_len` rows.
pub fn scan_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    alpha: Var,
    beta: Var,
    seq_len: usize,
    step: usize,
) -> Result<Var> {
    let xv = tape.value(x1);
    let (_, width) = xv.matrix_dims();
    let (c, sig) = scan_forward(
        xv.data(),
        width,
        seq_len,
        tape.value(alpha).data(),
        tape.value(beta).data(),
        step,
    )?;
    let out = xv.with_shape_of(c);
    Ok(tape.custom(
        vec![x1, alpha, beta],
        out,
        Box::new(ScanOp {
            seq_len,
            width,
            step,
            sig,
        }),
    ))
}

/// Parameter handles of one recurrent block.
#[derive(Clone, Copy, Debug)]
pub struct SwishRnnParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub b_c: ParamId,
    pub b_sigma: ParamId,
    pub b3: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct SwishRnn {
    pub params: SwishRnnParams,
    pub d: usize,
    pub d_prime: usize,
    pub gate: GateActivation,
}

impl SwishRnn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        d_prime: usize,
        gate: GateActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d_prime == 0 {
            return Err(Error::Config(format!("swishrnn dims d={d}, d'={d_prime}")));
        }
        let mut add = |name: &str, t: Tensor<T>, decay: bool| store.add(format!("{prefix}.{name}"), t, decay);
        let params = SwishRnnParams {
            w1: add("w1", truncated_normal(&[d, d_prime], INIT_STD, rng), true)?,
            w2: add("w2", truncated_normal(&[d, d_prime], INIT_STD, rng), true)?,
            w3: add("w3", truncated_normal(&[d_prime, d], INIT_STD, rng), true)?,
            b_c: add("b_c", Tensor::zeros(&[d_prime]), false)?,
            b_sigma: add("b_sigma", Tensor::zeros(&[d_prime]), false)?,
            b3: add("b3", Tensor::zeros(&[d]), false)?,
            alpha: add("alpha", Tensor::full(&[d_prime], T::one()), false)?,
            beta: add("beta", Tensor::zeros(&[d_prime]), false)?,
        };
        Ok(Self {
            params,
            d,
            d_prime,
            gate,
        })
    }

    /// Matrix parameters: `W1`, `W2` (d×d') and `W3` (d'×d).
    pub fn matrix_params(d: usize, d_prime: usize) -> usize {
        3 * d * d_prime
    }

    /// All parameters including the five d'-vectors and `b3`.
    pub fn total_params(d: usize, d_prime: usize) -> usize {
        Self::matrix_params(d, d_prime) + 4 * d_prime + d
    }

    /// `xbar` stacks whole sequences of `seq_len` rows; `step` is this
    /// layer's recurrence step size.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        xbar: Var,
        seq_len: usize,
        step: usize,
    ) -> Result<Var> {
        let p = &self.params;
        let [w1, w2, w3, b_c, b_sigma, b3, alpha, beta] =
            [p.w1, p.w2, p.w3, p.b_c, p.b_sigma, p.b3, p.alpha, p.beta].map(|id| store.bind(tape, id));
        let x1 = tape.matmul(xbar, w1)?;
        let x2 = tape.matmul(xbar, w2)?;
        let c = scan_on_tape(tape, x1, alpha, beta, seq_len, step)?;
        let c = tape.add_row(c, b_c)?;
        let g = tape.add_row(x2, b_sigma)?;
        let g = match self.gate {
            GateActivation::Gelu => tape.gelu(g),
            GateActivation::Sigmoid => tape.sigmoid(g),
        };
        let gated = tape.mul(c, g)?;
        let h = tape.matmul(gated, w3)?;
        tape.add_row(h, b3)
    }
}
