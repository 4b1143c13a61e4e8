//! Hash-bucket word tokenizer.
//!
//! Words are lowercased, stripped of leading/trailing ASCII punctuation and
//! hashed with 64-bit FNV-1a whose offset basis is XOR-ed with
//! [`TOKEN_SEED`]. Ids land in `1..vocab`; id 0 is reserved for padding.

use crate::error::{Error, Result};

pub const TOKEN_SEED: u64 = 0x5eed_a970_0000_0001;
pub const PAD_TOKEN: usize = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    bytes.iter().fold(FNV_OFFSET ^ seed, |h, &b| {
        (h ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

pub fn word_id(word: &str, vocab: usize) -> usize {
    1 + (fnv1a64(word.as_bytes(), TOKEN_SEED) % (vocab as u64 - 1)) as usize
}

pub fn tokenize(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .map(|w| word_id(&w, vocab))
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(ids)
}
