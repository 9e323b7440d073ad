//! Frozen toy text encoder: a seeded table of unit-norm embeddings over the
//! world vocabulary, mean-pooled over tokens. Stands in for a pretrained
//! text encoder so the fusion mechanism can be studied in isolation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_MAX_SEQUENCE_LEN: usize = 4096;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    index: BTreeMap<String, usize>,
    table: Vec<Vec<f64>>,
    dim: usize,
    unk: usize,
    max_sequence_len: usize,
    seed: u64,
}

impl TextEncoder {
    /// Build a frozen table: one unit-norm row per vocabulary word plus a
    /// reserved UNK row. Row contents depend only on (vocab order, dim, seed).
    pub fn new(vocab: &[&str], dim: usize, seed: u64) -> Self {
        let mut r = rng::derive(seed, 0x7e87);
        let mut table = Vec::with_capacity(vocab.len() + 1);
        let mut index = BTreeMap::new();
        let make_row = |r: &mut rand_chacha::ChaCha12Rng| {
            let mut row = vec![0.0; dim];
            rng::fill_standard_normal(r, &mut row);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            row
        };
        // row 0 is UNK
        table.push(make_row(&mut r));
        for (i, word) in vocab.iter().enumerate() {
            index.insert(word.to_lowercase(), i + 1);
            table.push(make_row(&mut r));
        }
        TextEncoder {
            index,
            table,
            dim,
            unk: 0,
            max_sequence_len: DEFAULT_MAX_SEQUENCE_LEN,
            seed,
        }
    }

    pub fn with_max_sequence_len(mut self, len: usize) -> Self {
        self.max_sequence_len = len;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_sequence_len(&self) -> usize {
        self.max_sequence_len
    }

    /// Whitespace/punctuation split, lowercased. Unknown tokens map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| *self.index.get(&t.to_lowercase()).unwrap_or(&self.unk))
            .collect()
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.table[token]
    }

    /// Token embedding sequence, one row per token; empty text yields a
    /// single UNK row so downstream streams never go zero-length.
    pub fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let mut tokens = self.tokenize(text);
        if tokens.is_empty() {
            tokens.push(self.unk);
        }
        if tokens.len() > self.max_sequence_len {
            return Err(Error::Capacity(format!(
                "{} tokens exceed max sequence length {}",
                tokens.len(),
                self.max_sequence_len
            )));
        }
        Ok(tokens.iter().map(|&t| self.table[t].clone()).collect())
    }

    /// Mean pooling over token embeddings.
    pub fn encode_pooled(&self, text: &str) -> Vec<f64> {
        let mut tokens = self.tokenize(text);
        if tokens.is_empty() {
            tokens.push(self.unk);
        }
        let mut out = vec![0.0; self.dim];
        for &t in &tokens {
            for (o, &v) in out.iter_mut().zip(self.table[t].iter()) {
                *o += v;
            }
        }
        let n = tokens.len() as f64;
        for o in out.iter_mut() {
            *o /= n;
        }
        out
    }
}
