//! Corpus ingestion, the byte-level BPE tokenizer and batch construction.

pub mod batch;
pub mod corpus;
pub mod vocab;

pub use batch::{pack_sequences, Batch, BatchIterator};
pub use corpus::{read_documents, split_documents, Corpus};
pub use vocab::{Vocab, CLS_ID, IGNORE_LABEL, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, UNK_ID};
