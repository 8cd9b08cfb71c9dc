//! Shared fixtures for the benchmarks: a small initialized model and a
//! deterministic sequence to corrupt and decode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockdlm::{ModelConfig, ModelParams, TokenSequence, Vocabulary};

/// Benchmark scale: big enough that per-call overhead is invisible, small
/// enough that a full criterion run stays in seconds.
pub const SEQ_LEN: usize = 64;
pub const BLOCK: usize = 8;

pub fn bench_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ffn: 128,
        max_positions: 2 * SEQ_LEN,
        ..ModelConfig::default()
    }
}

pub fn bench_params() -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    ModelParams::init(&bench_config(), &mut rng).expect("valid config")
}

/// A full-length sequence of byte tokens with a one-block prompt.
pub fn bench_sequence() -> TokenSequence {
    let vocab = Vocabulary::new();
    let tokens = (0..SEQ_LEN as u32).map(|i| vocab.byte_offset + (i * 37 % 256)).collect();
    TokenSequence::new(tokens, BLOCK, BLOCK, &vocab).expect("valid sequence")
}
