use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::Corpus;
use crate::data::vocab::{is_special, CLS_ID, IGNORE_LABEL, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

/// A batch of whole sequences, stored row-major `batch_size × seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    /// Original id at masked positions, [`IGNORE_LABEL`] elsewhere.
    pub mlm_labels: Vec<i32>,
    /// Flat indices `b·seq_len + i` of the masked positions, ascending.
    pub masked_positions: Vec<usize>,
}

impl Batch {
    /// An unmasked batch from padded sequences of equal length.
    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        let seq_len = seqs.first().map_or(0, |s| s.len());
        if seq_len == 0 || seqs.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Input("sequences must be non-empty and of equal length".into()));
        }
        let token_ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pad_mask = token_ids.iter().map(|&t| t == PAD_ID).collect();
        Ok(Self {
            batch_size: seqs.len(),
            seq_len,
            mlm_labels: vec![IGNORE_LABEL; token_ids.len()],
            token_ids,
            pad_mask,
            masked_positions: Vec::new(),
        })
    }

    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Positions of row `b` that may be masked: real, non-special tokens.
    pub fn maskable(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (b * self.seq_len..(b + 1) * self.seq_len).filter(|&p| !self.pad_mask[p] && !is_special(self.token_ids[p]))
    }

    /// Checks the structural contract between ids, padding, labels and
    /// masked positions.
    pub fn validate(&self) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if self.token_ids.len() != n || self.pad_mask.len() != n || self.mlm_labels.len() != n {
            return Err(Error::Contract(format!("batch arrays do not have {n} entries")));
        }
        let mut is_masked = vec![false; n];
        for w in self.masked_positions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Contract("masked positions not strictly ascending".into()));
            }
        }
        for &p in &self.masked_positions {
            if p >= n || self.pad_mask[p] || self.mlm_labels[p] < 0 || is_special(self.mlm_labels[p] as u32) {
                return Err(Error::Contract(format!("masked position {p} is padding or special")));
            }
            is_masked[p] = true;
        }
        for p in 0..n {
            if self.pad_mask[p] != (self.token_ids[p] == PAD_ID) {
                return Err(Error::Contract(format!("pad mask disagrees with ids at {p}")));
            }
            if !is_masked[p] && self.mlm_labels[p] != IGNORE_LABEL {
                return Err(Error::Contract(format!("label set off-mask at {p}")));
            }
        }
        Ok(())
    }
}

/// Packs the corpus into `seq_len` sequences: documents are concatenated,
/// each followed by `[SEP]`, cut into `seq_len - 1` pieces, and every piece
/// is prefixed with `[CLS]`. The final piece is padded.
pub fn pack_sequences(corpus: &Corpus, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be >= 2, got {seq_len}")));
    }
    let mut stream = Vec::with_capacity(corpus.num_tokens() + corpus.documents.len());
    for doc in &corpus.documents {
        stream.extend_from_slice(doc);
        stream.push(SEP_ID);
    }
    Ok(stream
        .chunks(seq_len - 1)
        .map(|chunk| {
            let mut s = Vec::with_capacity(seq_len);
            s.push(CLS_ID);
            s.extend_from_slice(chunk);
            s.resize(seq_len, PAD_ID);
            s
        })
        .collect())
}

/// Endless stream of unmasked batches over the packed corpus, reshuffled
/// every epoch from `(seed, epoch)`. The final batch of an epoch may be
/// smaller than `batch_size`. Yields nothing for an empty corpus.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    sequences: Vec<Vec<u32>>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(corpus: &Corpus, seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let sequences = pack_sequences(corpus, seq_len)?;
        let mut it = Self {
            sequences,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.sequences.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sequences.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.sequences.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let seqs: Vec<&[u32]> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.sequences[i].as_slice())
            .collect();
        self.cursor = end;
        Some(Batch::from_sequences(&seqs).expect("packed sequences share one length"))
    }
}
