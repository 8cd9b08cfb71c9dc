//! Byte-level corpus handling: vocabulary, token sequences with a block
//! partition, synthetic diagnostic tasks, and deterministic batch streams.
//!
//! Token ids are bytes shifted by a small special-token offset, so any text
//! round-trips exactly and the vocabulary stays fixed at 256 bytes plus the
//! mask / end-of-sequence / padding specials.

mod stream;
mod tasks;
mod textgen;

pub use stream::{batch_stream, pack_instance, pack_task, BatchStream, StreamSource};
pub use tasks::{
    check_completion, gen_synthetic, gen_synthetic_at, modular_add_instance, MultipleChoice,
    TaskInstance, TaskKind, PROMPT_WIDTH,
};
pub use textgen::gen_text_corpus;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Token identifier. The vocabulary is tiny, but `u32` keeps indexing free
/// of casts at use sites.
pub type TokenId = u32;

/// Fixed byte-level vocabulary: 256 raw bytes plus special tokens below
/// `byte_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Total number of token ids (`byte_offset + 256`).
    pub size: usize,
    /// Substituted at masked positions during corruption.
    pub mask_id: TokenId,
    /// Marks the end of a generated target.
    pub eos_id: TokenId,
    /// Fills sequence tails; never masked, never counted in any loss.
    pub pad_id: TokenId,
    /// First token id that maps to a raw byte.
    pub byte_offset: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let vocab = Vocabulary {
            size: 3 + 256,
            mask_id: 0,
            eos_id: 1,
            pad_id: 2,
            byte_offset: 3,
        };
        debug_assert!(vocab.check().is_ok());
        vocab
    }

    /// Validates the structural invariants: specials are distinct, below
    /// `byte_offset`, and the id space is exactly bytes plus specials.
    pub fn check(&self) -> Result<()> {
        let specials = [self.mask_id, self.eos_id, self.pad_id];
        for (i, a) in specials.iter().enumerate() {
            if *a >= self.byte_offset {
                return Err(Error::Corpus(format!(
                    "special id {a} collides with byte range (offset {})",
                    self.byte_offset
                )));
            }
            for b in &specials[i + 1..] {
                if a == b {
                    return Err(Error::Corpus(format!("duplicate special id {a}")));
                }
            }
        }
        if self.size != self.byte_offset as usize + 256 {
            return Err(Error::Corpus(format!(
                "size {} != byte_offset {} + 256",
                self.size, self.byte_offset
            )));
        }
        Ok(())
    }

    /// Maps text to byte tokens. Total and invertible for arbitrary bytes.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(|b| self.byte_offset + b as u32).collect()
    }

    /// Inverse of [`Vocabulary::tokenize`]. Special tokens (mask, eos, pad)
    /// are rejected: they never correspond to text.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t < self.byte_offset || t >= self.size as u32 {
                return Err(Error::Corpus(format!("token {t} is not a byte token")));
            }
            bytes.push((t - self.byte_offset) as u8);
        }
        String::from_utf8(bytes).map_err(|e| Error::Corpus(format!("invalid utf-8: {e}")))
    }

    /// Detokenizes the prefix of `tokens` before the first eos, skipping
    /// nothing else. Convenience for reading decoded outputs.
    pub fn detokenize_until_eos(&self, tokens: &[TokenId]) -> Result<String> {
        let end = tokens
            .iter()
            .position(|&t| t == self.eos_id)
            .unwrap_or(tokens.len());
        self.detokenize(&tokens[..end])
    }
}

/// A token sequence carrying its block partition: `tokens.len()` is a
/// multiple of `block_size`, and the first `prompt_len` positions are
/// conditioning context that is never corrupted and never scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub block_size: usize,
    pub prompt_len: usize,
}

impl TokenSequence {
    /// Builds a sequence and validates the block-partition invariants:
    /// length is a positive multiple of `block_size`, the trainable region
    /// `[prompt_len..]` is non-empty, and no raw position holds `mask_id`.
    pub fn new(
        tokens: Vec<TokenId>,
        block_size: usize,
        prompt_len: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Corpus("block_size must be positive".into()));
        }
        if tokens.is_empty() || tokens.len() % block_size != 0 {
            return Err(Error::Corpus(format!(
                "sequence length {} is not a positive multiple of block_size {block_size}",
                tokens.len()
            )));
        }
        if prompt_len >= tokens.len() {
            return Err(Error::Corpus(format!(
                "prompt_len {prompt_len} leaves no trainable region in length {}",
                tokens.len()
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t == vocab.mask_id) {
            return Err(Error::Corpus(format!(
                "raw sequence contains mask_id at position {pos}"
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size as u32) {
            return Err(Error::Corpus(format!("token {bad} out of vocabulary")));
        }
        Ok(TokenSequence {
            tokens,
            block_size,
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of blocks in the partition.
    pub fn num_blocks(&self) -> usize {
        self.tokens.len() / self.block_size
    }

    /// Half-open token range `[start, end)` of block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.block_size;
        start..start + self.block_size
    }

    /// Whether a position may be masked and scored: inside the trainable
    /// region and not padding.
    pub fn eligible(&self, pos: usize, vocab: &Vocabulary) -> bool {
        pos >= self.prompt_len && self.tokens[pos] != vocab.pad_id
    }
}
