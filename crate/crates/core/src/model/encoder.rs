use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::attention::dropout;
use crate::layers::{
    add_norm, bucket_matrix, Attention, Embeddings, Ffn, NormParams, ParamId, ParamStore, RelativeBias, SwishRnn,
};
use crate::model::config::{step_size_schedule, ModelConfig, Variant};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// The per-layer block that follows attention.
#[derive(Clone, Debug)]
pub enum Block {
    FeedForward(Ffn),
    Recurrent { block: SwishRnn, step: usize },
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub attention_norm: NormParams,
    pub block: Block,
    pub block_norm: NormParams,
}

/// Embeddings, a stack of attention + block layers, and a masked-LM head whose
/// projection is the transposed token-embedding table plus a free bias.
#[derive(Clone, Debug)]
pub struct EncoderModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embeddings: Embeddings,
    pub relative_bias: Option<RelativeBias>,
    pub layers: Vec<EncoderLayer>,
    pub mlm_bias: ParamId,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embeddings = Embeddings::new(
            &mut store,
            c.vocab_size,
            c.max_seq_len,
            c.d,
            c.variant.absolute_positions(),
            &mut rng,
        )?;
        let relative_bias = if c.variant.relative_bias() {
            Some(RelativeBias::new(
                &mut store,
                "relative_bias",
                c.num_buckets,
                c.max_distance,
                c.heads,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(c.num_layers);
        for i in 0..c.num_layers {
            let prefix = format!("layers.{i}");
            let attention = Attention::new(&mut store, &format!("{prefix}.attention"), c.d, c.heads, &mut rng)?;
            let attention_norm = NormParams::new(&mut store, &format!("{prefix}.attention_norm"), c.d)?;
            let block = match c.variant {
                Variant::Swish => Block::Recurrent {
                    block: SwishRnn::new(
                        &mut store,
                        &format!("{prefix}.swishrnn"),
                        c.d,
                        c.d_prime,
                        c.gate_activation,
                        &mut rng,
                    )?,
                    step: step_size_schedule(i, &c.step_schedule)?,
                },
                Variant::Orig | Variant::Rab => {
                    Block::FeedForward(Ffn::new(&mut store, &format!("{prefix}.ffn"), c.d, c.d_ffn, &mut rng)?)
                }
            };
            let block_norm = NormParams::new(&mut store, &format!("{prefix}.block_norm"), c.d)?;
            layers.push(EncoderLayer {
                attention,
                attention_norm,
                block,
                block_norm,
            });
        }
        let mlm_bias = store.add("mlm.bias", Tensor::zeros(&[c.vocab_size]), false)?;
        debug_assert_eq!(store.num_scalars(), count_params(c));
        Ok(Self {
            config: config.clone(),
            store,
            embeddings,
            relative_bias,
            layers,
            mlm_bias,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Hidden states for `ids` (whole sequences of `seq_len`), evaluated
    /// against `store`. Dropout is active iff `train` carries an RNG.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[u32],
        pad_mask: &[bool],
        seq_len: usize,
        mut train: Option<&mut R>,
    ) -> Result<Var> {
        if pad_mask.len() != ids.len() {
            return Err(Error::Input(format!(
                "pad mask has {} entries for {} tokens",
                pad_mask.len(),
                ids.len()
            )));
        }
        let c = &self.config;
        let mut x = self
            .embeddings
            .forward(tape, store, ids, seq_len, train.as_deref_mut().map(|r| (c.dropout, r)))?;
        let buckets = self
            .relative_bias
            .as_ref()
            .map(|_| bucket_matrix(seq_len, c.num_buckets, c.max_distance));
        for layer in &self.layers {
            let rel = self.relative_bias.as_ref().zip(buckets.as_deref());
            let att = layer.attention.forward(
                tape,
                store,
                x,
                seq_len,
                pad_mask,
                rel,
                train.as_deref_mut().map(|r| (c.attention_dropout, r)),
            )?;
            let att = match train.as_deref_mut() {
                Some(r) => dropout(tape, att, c.dropout, r)?,
                None => att,
            };
            let xbar = add_norm(tape, store, att, x, &layer.attention_norm)?;
            let h = match &layer.block {
                Block::FeedForward(ffn) => ffn.forward(tape, store, xbar)?,
                Block::Recurrent { block, step } => block.forward(tape, store, xbar, seq_len, *step)?,
            };
            let h = match train.as_deref_mut() {
                Some(r) => dropout(tape, h, c.dropout, r)?,
                None => h,
            };
            x = add_norm(tape, store, h, xbar, &layer.block_norm)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the given rows of `hidden` (all rows if `None`).
    pub fn mlm_logits(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.gather_rows(hidden, r.to_vec())?,
            None => hidden,
        };
        let table = store.bind(tape, self.embeddings.tokens);
        let logits = tape.matmul_t(h, table)?;
        let bias = store.bind(tape, self.mlm_bias);
        tape.add_row(logits, bias)
    }

    /// Eval-mode hidden states as a plain tensor.
    pub fn hidden_states(&self, ids: &[u32], pad_mask: &[bool], seq_len: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let h = self.encode::<ChaCha8Rng>(&mut tape, &self.store, ids, pad_mask, seq_len, None)?;
        Ok(tape.value(h).clone())
    }
}

/// Matrix parameters of one layer's block: `3·d·d'` or `2·d·d_ffn`.
pub fn block_matrix_params(config: &ModelConfig) -> usize {
    match config.variant {
        Variant::Swish => SwishRnn::matrix_params(config.d, config.d_prime),
        Variant::Orig | Variant::Rab => Ffn::matrix_params(config.d, config.d_ffn),
    }
}

/// Exact number of learnable scalars of the model `config` describes.
pub fn count_params(config: &ModelConfig) -> usize {
    let c = config;
    let mut n = c.vocab_size * c.d + 2 * c.d + c.vocab_size;
    if c.variant.absolute_positions() {
        n += c.max_seq_len * c.d;
    }
    if c.variant.relative_bias() {
        n += c.num_buckets * c.heads;
    }
    let block = match c.variant {
        Variant::Swish => SwishRnn::total_params(c.d, c.d_prime),
        Variant::Orig | Variant::Rab => Ffn::total_params(c.d, c.d_ffn),
    };
    n + c.num_layers * (Attention::num_params(c.d) + 4 * c.d + block)
}
