use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::numerics::Tape;
use crate::training::adam::{adam_step, AdamState};
use crate::training::hyper::{lr_schedule, TrainHyper};
use crate::training::loss::masked_lm_loss;
use crate::training::masking::mask_tokens;
use crate::training::metrics::StepRecord;

/// Independent RNG streams derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const MASK_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub skipped_sequences: usize,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn final_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.records.len());
        (n > 0).then(|| {
            self.records[self.records.len() - n..]
                .iter()
                .map(|r| r.loss)
                .sum::<f64>()
                / n as f64
        })
    }
}

/// Masked-LM pretraining from `state.step + 1` through `hyper.total_steps`.
///
/// Each step masks a fresh batch, runs forward and backward with dropout,
/// clips the global gradient norm and applies one Adam update at the
/// scheduled learning rate. `on_step` sees every record and the model after
/// the update; returning an error aborts the run.
pub fn train_loop<I, F>(
    model: &mut EncoderModel<f32>,
    state: &mut AdamState<f32>,
    batches: &mut I,
    hyper: &TrainHyper,
    mut on_step: F,
) -> Result<TrainSummary>
where
    I: Iterator<Item = Batch>,
    F: FnMut(&StepRecord, &EncoderModel<f32>, &AdamState<f32>) -> Result<()>,
{
    hyper.validate()?;
    let mut mask_rng = stream_rng(hyper.seed, MASK_STREAM);
    let mut dropout_rng = stream_rng(hyper.seed, DROPOUT_STREAM);
    let mut summary = TrainSummary::default();
    let start = Instant::now();
    for step in state.step + 1..=hyper.total_steps {
        let batch = batches
            .next()
            .ok_or_else(|| Error::Input("the corpus produced no batches".into()))?;
        let masked = mask_tokens(&batch, hyper.mask_rate, &mut mask_rng)?;
        summary.skipped_sequences += masked.skipped;
        let batch = masked.batch;
        if batch.masked_positions.is_empty() {
            log::warn!("step {step}: batch has no maskable tokens, skipping");
            continue;
        }

        let mut tape = Tape::new();
        let loss = masked_lm_loss(model, &model.store, &mut tape, &batch, Some(&mut dropout_rng))?;
        let loss_value = tape.value(loss).data()[0] as f64;
        let lr = lr_schedule(step, hyper);
        if !loss_value.is_finite() {
            return Err(non_finite(model, step, lr, format!("loss = {loss_value}")));
        }
        let grads = tape.backward(loss)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape, &grads);
        drop(tape);
        let norm = model.store.clip_grad_norm(hyper.grad_clip);
        if !norm.is_finite() {
            return Err(non_finite(model, step, lr, format!("gradient norm = {norm}")));
        }
        adam_step(&mut model.store, state, hyper, lr)?;
        model.store.zero_grads();

        let record = StepRecord {
            step,
            loss: loss_value,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record, model, state)?;
        summary.records.push(record);
    }
    Ok(summary)
}

fn non_finite(model: &EncoderModel<f32>, step: u64, lr: f64, what: String) -> Error {
    let mut detail = what;
    for p in model.store.iter() {
        let norm = p
            .tensor
            .grad()
            .map_or(0.0, |g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt());
        detail.push_str(&format!("\n  {}: grad norm {norm:.4e}", p.name));
    }
    Error::NonFinite { step, lr, detail }
}

/// Mean masked-LM loss over `batches` with dropout off and masks drawn from
/// `mask_seed`.
pub fn evaluate<I: Iterator<Item = Batch>>(
    model: &EncoderModel<f32>,
    batches: I,
    mask_rate: f64,
    mask_seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = stream_rng(mask_seed, MASK_STREAM);
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches {
        let batch = mask_tokens(&batch, mask_rate, &mut rng)?.batch;
        if batch.masked_positions.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let loss = masked_lm_loss::<f32, ChaCha8Rng>(model, &model.store, &mut tape, &batch, None)?;
        let n = batch.masked_positions.len();
        total += tape.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("evaluation corpus produced no masked tokens".into()));
    }
    Ok((total / count as f64, count))
}
