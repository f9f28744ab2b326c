//! Double-precision gradient verification for every block and for the
//! end-to-end model.
//!
//! Each check builds a scalar `sum(block(x) ⊙ R)` with a fixed random `R`,
//! takes the tape gradient of every parameter group and input, and compares
//! it against seven-point central differences of the same function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::Result;
use crate::layers::{
    add_norm, bucket_matrix, Attention, Embeddings, Ffn, GateActivation, NormParams, ParamStore, RelativeBias, SwishRnn,
};
use crate::model::{EncoderModel, ModelConfig, Variant};
use crate::numerics::{finite_diff_vjp, max_relative_error, Tape, Tensor, Var};
use crate::training::masked_lm_loss;

/// Stencil step for block checks. The block output is differenced element by
/// element, which keeps roundoff low.
pub const BLOCK_FD_STEP: f64 = 1e-3;

/// Stencil step for the end-to-end loss, a single scalar whose roundoff
/// (about `1e-16·|loss|/h`) calls for a larger step. Steps near `2e-2`
/// start to show truncation error on the embedding table.
pub const LOSS_FD_STEP: f64 = 5e-3;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub block: String,
    pub group: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
    }

    pub fn block_max(&self, block: &str) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.block == block)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Compares tape and finite-difference gradients of `sum(build(..) ⊙ R)` for
/// every parameter in `store` and every tensor in `inputs`.
pub fn check_block<F>(
    block: &str,
    store: &ParamStore<f64>,
    inputs: &[(&str, Tensor<f64>)],
    seed: u64,
    fd_step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let forward = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, store, &vars)?;
        Ok((tape, out, vars))
    };
    let output_of = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Vec<f64> {
        let (tape, out, _) = forward(store, inputs).expect("forward succeeded once");
        tape.value(out).data().to_vec()
    };

    let (mut tape, out, vars) = forward(store, &values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let weighted = tape.mul_const(out, weights.clone())?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&tape, &grads);

    let mut report = GradCheckReport::default();
    let mut push = |group: String, a: Option<&[f64]>, numeric: Tensor<f64>| {
        let zeros = vec![0.0; numeric.len()];
        report.groups.push(GroupReport {
            block: block.to_string(),
            group,
            coords: numeric.len(),
            max_rel_err: max_relative_error(a.unwrap_or(&zeros), numeric.data()),
        });
    };
    for id in store.ids() {
        let param = store.get(id);
        let mut probe_store = store.clone();
        let numeric = finite_diff_vjp(
            |probe| {
                *probe_store.tensor_mut(id) = probe.clone();
                output_of(&probe_store, &values)
            },
            &param.tensor,
            &weights,
            fd_step,
        );
        push(param.name.clone(), analytic.tensor(id).grad(), numeric);
    }
    for (i, (name, t)) in inputs.iter().enumerate() {
        let numeric = finite_diff_vjp(
            |probe| {
                let mut vals = values.clone();
                vals[i] = probe.clone();
                output_of(store, &vals)
            },
            t,
            &weights,
            fd_step,
        );
        push(format!("input.{name}"), grads.get(vars[i]), numeric);
    }
    Ok(report)
}

/// Perturbs every parameter away from its structured init (unit gains, zero
/// biases) so that no gradient term vanishes by symmetry.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Recurrent block at `l=5, d=8, d'=6` with the given step size and gate.
pub fn check_swishrnn(seed: u64, step: usize, gate: GateActivation) -> Result<GradCheckReport> {
    let (l, d, dp) = (5, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = SwishRnn::new(&mut store, "swishrnn", d, dp, gate, &mut rng)?;
    jitter(&mut store, &mut rng, 0.5);
    let x = random_tensor(&[l, d], &mut rng);
    check_block(
        &format!("swishrnn(k={step})"),
        &store,
        &[("x", x)],
        seed,
        BLOCK_FD_STEP,
        |tape, store, v| block.forward(tape, store, v[0], l, step),
    )
}

/// Attention at `l=4, d=8, h=2`, two sequences, one padded key, with or
/// without the relative bias.
pub fn check_attention(seed: u64, relative: bool) -> Result<GradCheckReport> {
    let (l, d, h, batch) = (4, 8, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attention", d, h, &mut rng)?;
    let rel = relative
        .then(|| RelativeBias::new(&mut store, "relative_bias", 8, 16, h, &mut rng))
        .transpose()?;
    jitter(&mut store, &mut rng, 0.5);
    let buckets = bucket_matrix(l, 8, 16);
    let mut pad = vec![false; batch * l];
    pad[batch * l - 1] = true;
    let x = random_tensor(&[batch * l, d], &mut rng);
    let name = if relative { "attention+rel_bias" } else { "attention" };
    check_block(name, &store, &[("x", x)], seed, BLOCK_FD_STEP, |tape, store, v| {
        attn.forward::<f64, ChaCha8Rng>(
            tape,
            store,
            v[0],
            l,
            &pad,
            rel.as_ref().map(|r| (r, buckets.as_slice())),
            None,
        )
    })
}

pub fn check_ffn(seed: u64) -> Result<GradCheckReport> {
    let (l, d, dff) = (5, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, "ffn", d, dff, &mut rng)?;
    jitter(&mut store, &mut rng, 0.5);
    let x = random_tensor(&[l, d], &mut rng);
    check_block("ffn", &store, &[("x", x)], seed, BLOCK_FD_STEP, |tape, store, v| {
        ffn.forward(tape, store, v[0])
    })
}

pub fn check_add_norm(seed: u64) -> Result<GradCheckReport> {
    let (l, d) = (5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let norm = NormParams::new(&mut store, "norm", d)?;
    jitter(&mut store, &mut rng, 0.5);
    let tilde = random_tensor(&[l, d], &mut rng);
    let x = random_tensor(&[l, d], &mut rng);
    check_block(
        "add_norm",
        &store,
        &[("tilde", tilde), ("x", x)],
        seed,
        BLOCK_FD_STEP,
        |tape, store, v| add_norm(tape, store, v[0], v[1], &norm),
    )
}

pub fn check_embeddings(seed: u64, absolute_positions: bool) -> Result<GradCheckReport> {
    let (vocab, l, d) = (11, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let emb = Embeddings::new(&mut store, vocab, l, d, absolute_positions, &mut rng)?;
    jitter(&mut store, &mut rng, 0.5);
    let ids: Vec<u32> = (0..2 * l).map(|_| rng.random_range(0..vocab as u32)).collect();
    let name = if absolute_positions {
        "embeddings+positions"
    } else {
        "embeddings"
    };
    check_block(name, &store, &[], seed, BLOCK_FD_STEP, |tape, store, _| {
        emb.forward::<f64, ChaCha8Rng>(tape, store, &ids, l, None)
    })
}

/// The configuration the end-to-end check runs on: 2 layers, `d=8`,
/// `d'=6`, `h=2`, `l=5`.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_layers: 2,
        d: 8,
        d_ffn: 12,
        d_prime: 6,
        heads: 2,
        head_dim: 4,
        vocab_size: 13,
        max_seq_len: 5,
        step_schedule: vec![1, 2, 4],
        gate_activation: GateActivation::Gelu,
        dropout: 0.0,
        attention_dropout: 0.0,
        num_buckets: 8,
        max_distance: 16,
    }
}

/// End-to-end masked-LM loss gradient, including the tied output embedding.
pub fn check_model(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout = 0.0;
    config.attention_dropout = 0.0;
    let mut model = EncoderModel::<f64>::new(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    jitter(&mut model.store, &mut rng, 0.3);
    let l = config.max_seq_len;
    let batch = random_batch(&config, 2, l, &mut rng);
    let store = model.store.clone();
    let name = format!("model[{}]", config.variant);
    check_block(&name, &store, &[], seed, LOSS_FD_STEP, |tape, store, _| {
        masked_lm_loss::<f64, ChaCha8Rng>(&model, store, tape, &batch, None)
    })
}

fn random_batch(config: &ModelConfig, batch: usize, l: usize, rng: &mut ChaCha8Rng) -> Batch {
    use crate::data::vocab::{IGNORE_LABEL, NUM_SPECIAL};
    let mut ids = Vec::with_capacity(batch * l);
    let mut labels = vec![IGNORE_LABEL; batch * l];
    let mut masked = Vec::new();
    for b in 0..batch {
        for i in 0..l {
            let id = rng.random_range(NUM_SPECIAL as u32..config.vocab_size as u32);
            ids.push(id);
            if i % 2 == b % 2 {
                let pos = b * l + i;
                labels[pos] = id as i32;
                masked.push(pos);
            }
        }
    }
    // the last position of the second sequence is padding
    let mut pad = vec![false; batch * l];
    let last = batch * l - 1;
    pad[last] = true;
    ids[last] = crate::data::vocab::PAD_ID;
    labels[last] = IGNORE_LABEL;
    masked.retain(|&p| p != last);
    for &p in &masked {
        ids[p] = crate::data::vocab::MASK_ID;
    }
    Batch {
        batch_size: batch,
        seq_len: l,
        token_ids: ids,
        pad_mask: pad,
        mlm_labels: labels,
        masked_positions: masked,
    }
}

/// Every block plus the 2-layer end-to-end recurrent model.
pub fn run_suite(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for step in [1, 2] {
        report.extend(check_swishrnn(seed, step, GateActivation::Gelu)?);
    }
    report.extend(check_swishrnn(seed, 1, GateActivation::Sigmoid)?);
    report.extend(check_attention(seed, false)?);
    report.extend(check_attention(seed, true)?);
    report.extend(check_ffn(seed)?);
    report.extend(check_add_norm(seed)?);
    report.extend(check_embeddings(seed, false)?);
    report.extend(check_embeddings(seed, true)?);
    report.extend(check_model(config, seed)?);
    Ok(report)
}
