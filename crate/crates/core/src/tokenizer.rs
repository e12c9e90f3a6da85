//! Byte-level tokenizer: ids 0..=255 are raw bytes, then two specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| u32::from(b)).collect()
    }

    /// Encodes with a leading BOS.
    pub fn encode_with_bos(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() + 1);
        out.push(BOS);
        out.extend(bytes.iter().map(|&b| u32::from(b)));
        out
    }

    /// Drops special ids; fails on ids outside the vocabulary.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS => {}
                _ => return Err(Error::Contract(format!("token id {id} outside vocabulary of {VOCAB_SIZE}"))),
            }
        }
        Ok(out)
    }
}
