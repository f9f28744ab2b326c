use rand::Rng;

use crate::data::{Batch, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::EncoderModel;
use crate::numerics::{Scalar, Tape, Var};

/// Mean cross-entropy of `logits` (one row per position) over the rows whose
/// label is not [`IGNORE_LABEL`].
pub fn mlm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[i32]) -> Result<Var> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    if rows.is_empty() {
        return Err(Error::Input("no masked positions in batch".into()));
    }
    let targets = rows.iter().map(|&i| labels[i] as usize).collect();
    let picked = tape.gather_rows(logits, rows)?;
    tape.cross_entropy(picked, targets)
}

/// Masked-LM loss of `batch` under `store`. Logits are only formed at the
/// masked rows. Dropout is active iff `train` carries an RNG.
pub fn masked_lm_loss<T: Scalar, R: Rng>(
    model: &EncoderModel<T>,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    batch: &Batch,
    train: Option<&mut R>,
) -> Result<Var> {
    if batch.masked_positions.is_empty() {
        return Err(Error::Input("no masked positions in batch".into()));
    }
    let hidden = model.encode(tape, store, &batch.token_ids, &batch.pad_mask, batch.seq_len, train)?;
    let logits = model.mlm_logits(tape, store, hidden, Some(&batch.masked_positions))?;
    let targets = batch
        .masked_positions
        .iter()
        .map(|&p| batch.mlm_labels[p] as usize)
        .collect();
    tape.cross_entropy(logits, targets)
}
