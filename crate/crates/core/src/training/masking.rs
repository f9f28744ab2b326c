use rand::seq::index::sample;
use rand::Rng;

use crate::data::{Batch, IGNORE_LABEL, MASK_ID};
use crate::error::{Error, Result};

/// Number of positions masked in a sequence with `maskable` candidates.
pub fn mask_count(maskable: usize, rate: f64) -> usize {
    // the epsilon keeps exact products such as 0.15·100 from flooring to 14
    (((rate * maskable as f64) + 1e-9).floor() as usize)
        .max(1)
        .min(maskable)
}

/// Result of masking a batch.
#[derive(Clone, Debug)]
pub struct Masked {
    pub batch: Batch,
    /// Sequences left unmasked because they had no maskable token.
    pub skipped: usize,
}

/// Replaces exactly `mask_count(n, rate)` uniformly chosen non-special,
/// non-pad tokens of every sequence by `[MASK]`, recording the originals as
/// labels.
pub fn mask_tokens<R: Rng + ?Sized>(batch: &Batch, rate: f64, rng: &mut R) -> Result<Masked> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate must be in (0, 1), got {rate}")));
    }
    let mut out = batch.clone();
    out.mlm_labels.iter_mut().for_each(|l| *l = IGNORE_LABEL);
    out.masked_positions.clear();
    let mut skipped = 0;
    for b in 0..batch.batch_size {
        let candidates: Vec<usize> = batch.maskable(b).collect();
        if candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let k = mask_count(candidates.len(), rate);
        let mut chosen: Vec<usize> = sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        chosen.sort_unstable();
        for &p in &chosen {
            out.mlm_labels[p] = batch.token_ids[p] as i32;
            out.token_ids[p] = MASK_ID;
        }
        out.masked_positions.extend(chosen);
    }
    if skipped > 0 {
        log::warn!("{skipped} sequence(s) had no maskable tokens");
    }
    Ok(Masked { batch: out, skipped })
}
