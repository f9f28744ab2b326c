use std::path::Path;

use crate::data::vocab::Vocab;
use crate::error::{Error, Result};

/// Splits text into documents at blank lines, dropping empty ones.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    Ok(split_documents(&std::fs::read_to_string(path)?))
}

/// Tokenized documents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn from_documents<S: AsRef<str>>(docs: &[S], vocab: &Vocab) -> Self {
        Self {
            documents: docs
                .iter()
                .map(|d| vocab.encode(d.as_ref()))
                .filter(|ids| !ids.is_empty())
                .collect(),
            vocab_size: vocab.len(),
        }
    }

    pub fn new(documents: Vec<Vec<u32>>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = documents.iter().flatten().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { documents, vocab_size })
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Splits off the last `fraction` of documents (at least one when the
    /// corpus has two or more).
    pub fn split_tail(mut self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.documents.len();
        let take = if n < 2 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        let tail = self.documents.split_off(n - take);
        let vocab_size = self.vocab_size;
        (
            self,
            Corpus {
                documents: tail,
                vocab_size,
            },
        )
    }
}
