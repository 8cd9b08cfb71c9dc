//! Hot-path benchmarks: forward passes under each attention layout,
//! corruption sampling, and one cached denoising step.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockdlm::attention::CleanContext;
use blockdlm::decoder::{self, DecodeConfig};
use blockdlm::masking::{corrupt, gumbel_top_k};
use blockdlm::model::{ar_inputs, dlm_inputs, forward};
use blockdlm::{LayoutKind, MaskMode, MaskSchedule, Vocabulary};
use blockdlm_bench::{bench_params, bench_sequence, BLOCK, SEQ_LEN};

fn forward_layouts(c: &mut Criterion) {
    let params = bench_params();
    let vocab = Vocabulary::new();
    let seq = bench_sequence();
    let schedule = MaskSchedule::new(MaskMode::Uniform, f64::INFINITY, BLOCK).expect("schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = corrupt(&seq, &vocab, &schedule, 0.5, &mut rng).expect("corrupt");

    let mut group = c.benchmark_group("forward");
    let (tokens, layout, _) = ar_inputs(&seq, &vocab).expect("ar inputs");
    group.bench_function("causal", |b| {
        b.iter(|| forward(&params, &tokens, &layout).expect("forward"))
    });
    for kind in [LayoutKind::Bidirectional, LayoutKind::BlockNoisy, LayoutKind::BlockClean] {
        let (tokens, layout, _) =
            dlm_inputs(&noise, kind, false, CleanContext::BlockCausal).expect("dlm inputs");
        group.bench_function(kind.name(), |b| {
            b.iter(|| forward(&params, &tokens, &layout).expect("forward"))
        });
    }
    group.finish();
}

fn masking(c: &mut Criterion) {
    let vocab = Vocabulary::new();
    let seq = bench_sequence();
    let uniform = MaskSchedule::new(MaskMode::Uniform, f64::INFINITY, BLOCK).expect("schedule");
    let posdep = MaskSchedule::new(MaskMode::PositionDependent, 0.1, BLOCK).expect("schedule");

    let mut group = c.benchmark_group("masking");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    group.bench_function("corrupt_uniform", |b| {
        b.iter(|| corrupt(&seq, &vocab, &uniform, 0.5, &mut rng).expect("corrupt"))
    });
    group.bench_function("corrupt_posdep", |b| {
        b.iter(|| corrupt(&seq, &vocab, &posdep, 0.5, &mut rng).expect("corrupt"))
    });
    let weights: Vec<f64> = (1..=SEQ_LEN).map(|i| i as f64).collect();
    group.bench_function("gumbel_top_k", |b| {
        b.iter(|| gumbel_top_k(&weights, SEQ_LEN / 2, &mut rng).expect("sample"))
    });
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let params = bench_params();
    let vocab = Vocabulary::new();
    let prompt: Vec<u32> = (0..BLOCK as u32).map(|i| vocab.byte_offset + i).collect();
    let cfg = DecodeConfig {
        eval_block_size: BLOCK,
        confidence_threshold: Some(0.5),
        max_new_tokens: 2 * BLOCK,
        eos_id: None,
        ..DecodeConfig::default()
    };

    let mut group = c.benchmark_group("decode");
    let state = decoder::start(&params, &prompt, cfg).expect("start");
    group.bench_function("denoise_step", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| decoder::denoise_step(&params, &mut s).expect("step"),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("generate_2_blocks", |b| {
        b.iter(|| decoder::generate(&params, &prompt, cfg).expect("generate"))
    });
    group.finish();
}

criterion_group!(benches, forward_layouts, masking, decoding);
criterion_main!(benches);
