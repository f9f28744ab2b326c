use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::attention::dropout;
use crate::layers::norm::NormParams;
use crate::layers::params::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::numerics::{Scalar, Tape, Var};

/// Token embeddings, optional learned absolute positions, then LayerNorm.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub tokens: ParamId,
    pub positions: Option<ParamId>,
    pub norm: NormParams,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d: usize,
}

impl Embeddings {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        max_seq_len: usize,
        d: usize,
        absolute_positions: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let tokens = store.add(
            "embeddings.tokens",
            truncated_normal(&[vocab_size, d], INIT_STD, rng),
            true,
        )?;
        let positions = if absolute_positions {
            Some(store.add(
                "embeddings.positions",
                truncated_normal(&[max_seq_len, d], INIT_STD, rng),
                true,
            )?)
        } else {
            None
        };
        let norm = NormParams::new(store, "embeddings.norm", d)?;
        Ok(Self {
            tokens,
            positions,
            norm,
            vocab_size,
            max_seq_len,
            d,
        })
    }

    /// Raw lookup (token row plus position row), before normalization.
    pub fn lookup<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[u32],
        seq_len: usize,
    ) -> Result<Var> {
        if seq_len == 0 || ids.is_empty() || !ids.len().is_multiple_of(seq_len) {
            return Err(Error::Input(format!(
                "{} token ids do not form sequences of length {seq_len}",
                ids.len()
            )));
        }
        if seq_len > self.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = store.bind(tape, self.tokens);
        let x = tape.gather_rows(table, ids.iter().map(|&i| i as usize).collect())?;
        match self.positions {
            Some(pos) => {
                let table = store.bind(tape, pos);
                let index = (0..ids.len()).map(|i| i % seq_len).collect();
                let p = tape.gather_rows(table, index)?;
                tape.add(x, p)
            }
            None => Ok(x),
        }
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[u32],
        seq_len: usize,
        dropout_rng: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let x = self.lookup(tape, store, ids, seq_len)?;
        let x = self.norm.forward(tape, store, x)?;
        match dropout_rng {
            Some((rate, rng)) => dropout(tape, x, rate, rng),
            None => Ok(x),
        }
    }
}
