//! Byte-level BPE vocabulary.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label value at positions that carry no masked-LM target.
pub const IGNORE_LABEL: i32 = -100;

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Splits text into pieces that BPE never merges across: a run of
/// non-whitespace with at most one leading space, or a run of whitespace.
/// Concatenating the pieces gives back the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let ws = |i: usize| text[i..].chars().next().is_some_and(char::is_whitespace);
    let mut i = 0;
    while i < bytes.len() {
        if ws(i) {
            let mut j = i;
            while j < bytes.len() && ws(j) {
                j += text[j..].chars().next().unwrap().len_utf8();
            }
            // a single trailing space attaches to the following word
            let split = if j < bytes.len() && bytes[j - 1] == b' ' {
                j - 1
            } else {
                j
            };
            if split > start {
                out.push(&text[start..split]);
            }
            start = split;
            i = j;
        } else {
            let mut j = i;
            while j < bytes.len() && !ws(j) {
                j += text[j..].chars().next().unwrap().len_utf8();
            }
            out.push(&text[start..j]);
            start = j;
            i = j;
        }
    }
    if start < bytes.len() {
        out.push(&text[start..]);
    }
    out
}

/// Token table: ids below [`NUM_SPECIAL`] are the reserved specials, every
/// other id names a byte string.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    max_token_len: usize,
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Vocab {
    fn with_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate().skip(NUM_SPECIAL) {
            if t.is_empty() {
                return Err(Error::Input(format!("token {id} is empty")));
            }
            if index.insert(t.clone(), id as u32).is_some() {
                return Err(Error::Input(format!(
                    "duplicate token {:?} at id {id}",
                    String::from_utf8_lossy(t)
                )));
            }
        }
        let max_token_len = tokens.iter().skip(NUM_SPECIAL).map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            tokens,
            index,
            max_token_len,
        })
    }

    fn specials() -> Vec<Vec<u8>> {
        SPECIAL_TOKENS.iter().map(|s| s.as_bytes().to_vec()).collect()
    }

    /// Learns merges over `texts` until the vocabulary holds `target_size`
    /// entries or no adjacent pair is left. The most frequent pair merges
    /// first; ties go to the lexicographically smaller `(left, right)` bytes.
    pub fn build<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Self> {
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for t in texts {
            for piece in pretokenize(t.as_ref()) {
                *word_counts.entry(piece).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, u64)> = word_counts.into_iter().collect();
        words.sort_unstable();

        let mut seen = [false; 256];
        for (w, _) in &words {
            for &b in w.as_bytes() {
                seen[b as usize] = true;
            }
        }
        let mut tokens = Self::specials();
        let mut byte_id = [0u32; 256];
        for b in 0..256 {
            if seen[b] {
                byte_id[b] = tokens.len() as u32;
                tokens.push(vec![b as u8]);
            }
        }
        let mut lookup: HashMap<Vec<u8>, u32> = tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIAL)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let mut symbols: Vec<Vec<u32>> = words
            .iter()
            .map(|(w, _)| w.as_bytes().iter().map(|&b| byte_id[b as usize]).collect())
            .collect();
        let counts: Vec<u64> = words.iter().map(|(_, c)| *c).collect();
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut where_pair: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, sym) in symbols.iter().enumerate() {
            for p in sym.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += counts[wi];
                where_pair.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        let candidate = |pair: (u32, u32), count: u64, tokens: &[Vec<u8>]| Candidate {
            count,
            key: Reverse((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone())),
            pair,
        };
        let mut heap: BinaryHeap<Candidate> = pair_counts.iter().map(|(&p, &c)| candidate(p, c, &tokens)).collect();

        while tokens.len() < target_size {
            let Some(best) = heap.pop() else { break };
            let current = pair_counts.get(&best.pair).copied().unwrap_or(0);
            if current == 0 {
                continue;
            }
            if current != best.count {
                heap.push(candidate(best.pair, current, &tokens));
                continue;
            }
            let (a, b) = best.pair;
            let mut merged = tokens[a as usize].clone();
            merged.extend_from_slice(&tokens[b as usize]);
            let new_id = match lookup.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as u32;
                    lookup.insert(merged.clone(), id);
                    tokens.push(merged);
                    id
                }
            };
            let mut affected: Vec<usize> = where_pair.remove(&best.pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let old = &symbols[wi];
                let mut new = Vec::with_capacity(old.len());
                let mut i = 0;
                while i < old.len() {
                    if i + 1 < old.len() && old[i] == a && old[i + 1] == b {
                        new.push(new_id);
                        i += 2;
                    } else {
                        new.push(old[i]);
                        i += 1;
                    }
                }
                let c = counts[wi];
                for p in old.windows(2) {
                    let key = (p[0], p[1]);
                    if let Some(v) = pair_counts.get_mut(&key) {
                        *v -= c;
                    }
                    touched.insert(key);
                }
                for p in new.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.entry(key).or_default() += c;
                    where_pair.entry(key).or_default().insert(wi);
                    touched.insert(key);
                }
                symbols[wi] = new;
            }
            pair_counts.remove(&best.pair);
            let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
            touched.sort_unstable();
            for key in touched {
                match pair_counts.get(&key) {
                    Some(&0) => {
                        pair_counts.remove(&key);
                    }
                    Some(&c) => heap.push(candidate(key, c, &tokens)),
                    None => {}
                }
            }
        }
        Self::with_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, token: &[u8]) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match segmentation of every pretokenized piece. Bytes
    /// outside the learned alphabet become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        for piece in pretokenize(text) {
            let ids = cache
                .entry(piece)
                .or_insert_with(|| self.encode_piece(piece.as_bytes()));
            out.extend_from_slice(ids);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_token_len.min(bytes.len() - pos);
            let hit = (1..=longest)
                .rev()
                .find_map(|n| self.index.get(&bytes[pos..pos + n]).map(|&id| (id, n)));
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => {
                    out.push(UNK_ID);
                    pos += 1;
                }
            }
        }
        out
    }

    /// Concatenates token bytes; specials render as their bracketed names.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.tokens.get(id as usize) {
                Some(t) => bytes.extend_from_slice(t),
                None => bytes.extend_from_slice(SPECIAL_TOKENS[UNK_ID as usize].as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// One token per line, line number = id. Bytes are written through a
    /// reversible byte-to-printable-character table so every token fits on
    /// one line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let table = byte_to_char();
        let mut text = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            if id < NUM_SPECIAL {
                text.push_str(SPECIAL_TOKENS[id]);
            } else {
                text.extend(t.iter().map(|&b| table[b as usize]));
            }
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let inverse: HashMap<char, u8> = byte_to_char().iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut tokens = Vec::new();
        for (id, line) in text.lines().enumerate() {
            if id < NUM_SPECIAL {
                if line != SPECIAL_TOKENS[id] {
                    return Err(Error::Input(format!(
                        "vocab line {id} is {line:?}, expected {}",
                        SPECIAL_TOKENS[id]
                    )));
                }
                tokens.push(line.as_bytes().to_vec());
                continue;
            }
            let bytes = line
                .chars()
                .map(|c| inverse.get(&c).copied())
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| Error::Input(format!("vocab line {id} has an unmapped character")))?;
            tokens.push(bytes);
        }
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::Input("vocab file is missing the special tokens".into()));
        }
        Self::with_tokens(tokens)
    }
}

/// Printable bytes map to themselves; the rest map to code points from 256
/// upward, in byte order.
fn byte_to_char() -> [char; 256] {
    let printable = |b: u8| (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0..=255u8 {
        table[b as usize] = if printable(b) {
            char::from_u32(b as u32).unwrap()
        } else {
            let c = char::from_u32(next).unwrap();
            next += 1;
            c
        };
    }
    table
}
