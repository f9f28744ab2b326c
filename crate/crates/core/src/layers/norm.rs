use crate::error::Result;
use crate::layers::params::{ParamId, ParamStore};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Layer-norm epsilon (BERT's value).
pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], T::one()), false)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (g, b) = (store.bind(tape, self.gain), store.bind(tape, self.bias));
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

/// Residual connection followed by layer normalization: `LayerNorm(tilde + x)`.
pub fn add_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    tilde: Var,
    x: Var,
    norm: &NormParams,
) -> Result<Var> {
    let sum = tape.add(tilde, x)?;
    norm.forward(tape, store, sum)
}
