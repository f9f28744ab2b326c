use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::params::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Two-layer GeLU MLP, the baseline block the recurrent block replaces.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d: usize,
    pub d_ffn: usize,
}

impl Ffn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        d_ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d_ffn == 0 {
            return Err(Error::Config(format!("ffn dims d={d}, d_ffn={d_ffn}")));
        }
        Ok(Self {
            w1: store.add(
                format!("{prefix}.w1"),
                truncated_normal(&[d, d_ffn], INIT_STD, rng),
                true,
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ffn]), false)?,
            w2: store.add(
                format!("{prefix}.w2"),
                truncated_normal(&[d_ffn, d], INIT_STD, rng),
                true,
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]), false)?,
            d,
            d_ffn,
        })
    }

    pub fn matrix_params(d: usize, d_ffn: usize) -> usize {
        2 * d * d_ffn
    }

    pub fn total_params(d: usize, d_ffn: usize) -> usize {
        Self::matrix_params(d, d_ffn) + d_ffn + d
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|id| store.bind(tape, id));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}
