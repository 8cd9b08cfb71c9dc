//! Deterministic packing and batch streaming.
//!
//! A packed sequence is `[space-padded prompt][target][eos][pad...]` with
//! the prompt region block-aligned, so every block is either pure context,
//! pure trainable tokens, or trailing padding. Streams are pure functions
//! of `(seed, global index)`: sharding the index range across workers or
//! re-running a job reproduces identical batches.

use super::tasks::{gen_synthetic_at, pad_prompt, TaskInstance, TaskKind, PROMPT_WIDTH};
use super::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Where a batch stream draws sequences from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamSource {
    /// Plain-text corpus file, tokenized bytewise and cut into
    /// non-overlapping `seq_len` windows with no prompt region.
    File(PathBuf),
    /// Synthetic task mix; index `i` draws from `kinds[i % kinds.len()]`,
    /// giving each task an equal share of the token budget.
    Synthetic { kinds: Vec<TaskKind> },
}

/// Packs one prompt/completion pair into a fixed-length sequence: the
/// prompt is left-padded with spaces to `prompt_width`, the completion is
/// filled with eos tokens up to the next block boundary, and whole pad
/// blocks fill the remainder. Every position of the completion's blocks is
/// therefore a real training target (content or eos), so a generation-time
/// block of all masks is exactly the t=1 training state; pad positions,
/// which are never masked or scored, only occur in untouched trailing
/// blocks.
pub fn pack_instance(
    prompt: &str,
    completion: &str,
    vocab: &Vocabulary,
    seq_len: usize,
    block_size: usize,
    prompt_width: usize,
) -> Result<TokenSequence> {
    if prompt_width % block_size != 0 {
        return Err(Error::Corpus(format!(
            "prompt_width {prompt_width} is not a multiple of block_size {block_size}"
        )));
    }
    if seq_len % block_size != 0 || seq_len <= prompt_width {
        return Err(Error::Corpus(format!(
            "seq_len {seq_len} must be a multiple of block_size {block_size} larger than prompt_width {prompt_width}"
        )));
    }
    if prompt.len() > prompt_width {
        return Err(Error::Corpus(format!(
            "prompt {prompt:?} exceeds prompt_width {prompt_width}"
        )));
    }
    let room = seq_len - prompt_width;
    if completion.len() + 1 > room {
        return Err(Error::Corpus(format!(
            "completion {completion:?} plus eos exceeds trainable region {room}"
        )));
    }
    let mut tokens = vocab.tokenize(&pad_prompt(prompt, prompt_width));
    tokens.extend(vocab.tokenize(completion));
    tokens.push(vocab.eos_id);
    let boundary = tokens.len().div_ceil(block_size) * block_size;
    tokens.resize(boundary, vocab.eos_id);
    tokens.resize(seq_len, vocab.pad_id);
    TokenSequence::new(tokens, block_size, prompt_width, vocab)
}

/// Infinite deterministic stream of training batches.
pub struct BatchStream {
    vocab: Vocabulary,
    seq_len: usize,
    block_size: usize,
    batch_size: usize,
    seed: u64,
    next_index: u64,
    kind: StreamKind,
}

enum StreamKind {
    Windows { tokens: Vec<u32> },
    Synthetic { kinds: Vec<TaskKind> },
}

/// Opens a batch stream over `source`. `seq_len` must be a multiple of
/// `block_size`; file sources must contain at least one full window.
pub fn batch_stream(
    source: &StreamSource,
    vocab: &Vocabulary,
    seq_len: usize,
    block_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Corpus("batch_size must be positive".into()));
    }
    if seq_len == 0 || seq_len % block_size != 0 {
        return Err(Error::Corpus(format!(
            "seq_len {seq_len} is not a positive multiple of block_size {block_size}"
        )));
    }
    let kind = match source {
        StreamSource::File(path) => {
            let text = std::fs::read_to_string(path)?;
            let tokens = vocab.tokenize(&text);
            if tokens.len() < seq_len {
                return Err(Error::Corpus(format!(
                    "corpus {} holds {} tokens, shorter than one {seq_len}-token window",
                    path.display(),
                    tokens.len()
                )));
            }
            StreamKind::Windows { tokens }
        }
        StreamSource::Synthetic { kinds } => {
            if kinds.is_empty() {
                return Err(Error::Corpus("synthetic source needs at least one task".into()));
            }
            StreamKind::Synthetic { kinds: kinds.clone() }
        }
    };
    Ok(BatchStream {
        vocab: *vocab,
        seq_len,
        block_size,
        batch_size,
        seed,
        next_index: 0,
        kind,
    })
}

impl BatchStream {
    /// Sequence at global stream index `i`, independent of batching.
    pub fn sequence_at(&self, i: u64) -> Result<TokenSequence> {
        match &self.kind {
            StreamKind::Windows { tokens } => {
                let windows = (tokens.len() / self.seq_len) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i.wrapping_add(1));
                let w = rng.gen_range(0..windows) as usize;
                let slice = tokens[w * self.seq_len..(w + 1) * self.seq_len].to_vec();
                TokenSequence::new(slice, self.block_size, 0, &self.vocab)
            }
            StreamKind::Synthetic { kinds } => {
                let kind = kinds[(i % kinds.len() as u64) as usize];
                let inst = gen_synthetic_at(kind, self.seed, i);
                pack_instance(
                    &inst.prompt,
                    &inst.target,
                    &self.vocab,
                    self.seq_len,
                    self.block_size,
                    PROMPT_WIDTH,
                )
            }
        }
    }

    /// The batch covering global indices `[b*batch_size, (b+1)*batch_size)`.
    pub fn batch_at(&self, b: u64) -> Result<Vec<TokenSequence>> {
        let start = b * self.batch_size as u64;
        (0..self.batch_size as u64)
            .map(|j| self.sequence_at(start + j))
            .collect()
    }
}

impl Iterator for BatchStream {
    type Item = Result<Vec<TokenSequence>>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.next_index;
        self.next_index += 1;
        Some(self.batch_at(b))
    }
}

/// Convenience used throughout evaluation: packs a task instance with the
/// standard prompt width.
pub fn pack_task(
    inst: &TaskInstance,
    completion: &str,
    vocab: &Vocabulary,
    seq_len: usize,
    block_size: usize,
) -> Result<TokenSequence> {
    pack_instance(&inst.prompt, completion, vocab, seq_len, block_size, PROMPT_WIDTH)
}
