//! Positional structure of the denoising loss: where in a block (and where
//! in the sequence) the model finds masked tokens hard, plus the matching
//! decode-order profile.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, TaskSpec};
use super::evals::eval_task_generation;
use crate::attention::{CleanContext, LayoutKind};
use crate::corpus::{
    gen_synthetic_at, gen_text_corpus, pack_task, TokenSequence, Vocabulary, PROMPT_WIDTH,
};
use crate::decoder::trace_position_steps;
use crate::error::{Error, Result};
use crate::masking::{corrupt, sample_noise_level, MaskSchedule};
use crate::model::forward::nll_f64;
use crate::model::{dlm_inputs, forward, load_checkpoint, ModelParams, Scalar, TrainState};

/// Mean masked-token loss by position, estimated over noise draws.
#[derive(Debug, Clone)]
pub struct LossProfiles {
    /// Mean NLL per absolute position; NaN where a position was never
    /// masked (prompt region, padding beyond every completion).
    pub per_position: Vec<f64>,
    /// How many masked occurrences each position contributed.
    pub counts: Vec<usize>,
    /// `per_position` folded by in-block offset.
    pub in_block: Vec<f64>,
    pub block_size: usize,
}

/// Estimates per-position loss by corrupting each sequence `n_draws` times
/// under the schedule and recording every masked position's NLL.
pub fn loss_profiles<F: Scalar>(
    params: &ModelParams<F>,
    seqs: &[TokenSequence],
    schedule: &MaskSchedule,
    kind: LayoutKind,
    clean_ctx: CleanContext,
    n_draws: usize,
    seed: u64,
) -> Result<LossProfiles> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Config("no sequences to profile".into()))?;
    let len = first.len();
    if seqs.iter().any(|s| s.len() != len) {
        return Err(Error::Config("profile sequences must share a length".into()));
    }
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be positive".into()));
    }
    let vocab = Vocabulary::new();
    let mut sums = vec![0.0f64; len];
    let mut counts = vec![0usize; len];
    for (si, seq) in seqs.iter().enumerate() {
        for d in 0..n_draws {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((si as u64) << 24) | (d as u64 + 1));
            let t = sample_noise_level(&mut rng);
            let noise = corrupt(seq, &vocab, schedule, t, &mut rng)?;
            let (tokens, layout, items) =
                dlm_inputs(&noise, kind, params.config.token_shift, clean_ctx)?;
            let logits = forward(params, &tokens, &layout)?;
            for item in &items {
                let row = logits
                    .at_row(item.row)
                    .ok_or_else(|| Error::Model(format!("missing logits at row {}", item.row)))?;
                let pos = item.row + usize::from(params.config.token_shift);
                sums[pos] += nll_f64(row, item.target);
                counts[pos] += 1;
            }
        }
    }

    let per_position: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    let l_prime = schedule.block_size;
    let mut block_sums = vec![0.0f64; l_prime];
    let mut block_counts = vec![0usize; l_prime];
    for pos in 0..len {
        if counts[pos] > 0 {
            block_sums[pos % l_prime] += sums[pos];
            block_counts[pos % l_prime] += counts[pos];
        }
    }
    let in_block = block_sums
        .iter()
        .zip(&block_counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(LossProfiles {
        per_position,
        counts,
        in_block,
        block_size: l_prime,
    })
}

/// Normalized autocorrelation of `series` at lags `0..=max_lag`:
/// `r[k] = sum (x_i - mean)(x_{i+k} - mean) / sum (x_i - mean)^2`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() < 2 || max_lag >= series.len() {
        return Err(Error::Config(format!(
            "need more than max_lag {max_lag} points, got {}",
            series.len()
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(
            "series has gaps (non-finite entries); trim it first".into(),
        ));
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let var: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return Err(Error::Config("constant series has no autocorrelation".into()));
    }
    Ok((0..=max_lag)
        .map(|k| {
            let cov: f64 = (0..series.len() - k)
                .map(|i| (series[i] - mean) * (series[i + k] - mean))
                .sum();
            cov / var
        })
        .collect())
}

/// Positional profiles of one checkpoint, bundled for report emission.
#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub loss: LossProfiles,
    /// Mean within-block commit step per relative position.
    pub decode_steps: Vec<f64>,
    /// Autocorrelation of the per-position loss over the trainable region,
    /// lags `0..=max_lag`.
    pub autocorr: Vec<f64>,
    /// First profiled position (positions before it are prompt).
    pub skip: usize,
}

/// Builds evaluation sequences for `cfg`: packed task instances, or text
/// windows cut from the deterministic corpus.
pub fn profile_sequences(cfg: &ExperimentConfig) -> Result<Vec<TokenSequence>> {
    let vocab = Vocabulary::new();
    match &cfg.task {
        TaskSpec::Synthetic(kinds) => (0..cfg.eval_instances)
            .map(|i| {
                let kind = kinds[i % kinds.len()];
                let inst = gen_synthetic_at(kind, cfg.seed.wrapping_add(0x50F11E), i as u64);
                pack_task(&inst, &inst.target, &vocab, cfg.seq_len, cfg.train_block_size)
            })
            .collect(),
        TaskSpec::Text => {
            let text = match &cfg.text_path {
                Some(path) => std::fs::read_to_string(path)?,
                None => gen_text_corpus(super::train::TEXT_CORPUS_SEED, cfg.text_bytes),
            };
            let tokens = vocab.tokenize(&text);
            let windows = tokens.len() / cfg.seq_len;
            if windows == 0 {
                return Err(Error::Config(format!(
                    "text corpus holds {} tokens, shorter than one {}-token window",
                    tokens.len(),
                    cfg.seq_len
                )));
            }
            (0..windows.min(cfg.eval_instances))
                .map(|w| {
                    TokenSequence::new(
                        tokens[w * cfg.seq_len..(w + 1) * cfg.seq_len].to_vec(),
                        cfg.train_block_size,
                        0,
                        &vocab,
                    )
                })
                .collect()
        }
    }
}

/// Loads a checkpoint and measures its positional profiles on the data the
/// config describes: the loss profile over noise draws, the decode-step
/// profile from thresholded generation, and the loss profile's
/// autocorrelation over the trainable region.
pub fn analyze_profiles(checkpoint: &std::path::Path, cfg: &ExperimentConfig) -> Result<ProfileReport> {
    let state: TrainState<f32> = load_checkpoint(checkpoint)?;
    let params = state.params;
    let schedule = cfg.mask_schedule()?;
    let seqs = profile_sequences(cfg)?;
    let loss = loss_profiles(
        &params,
        &seqs,
        &schedule,
        cfg.attention,
        cfg.clean_context,
        cfg.mc_samples,
        cfg.seed,
    )?;

    // Decode-step profile at the first thresholded grid point (the off
    // sentinel degenerates to exactly one commit per step).
    let tau = cfg
        .tau_grid
        .iter()
        .copied()
        .find(|t| t.is_some())
        .unwrap_or(None);
    let eval_block = cfg.eval_block_sizes[0];
    let decode_cfg = cfg.decode_config(eval_block, tau);
    let traces = match &cfg.task {
        TaskSpec::Synthetic(kinds) => {
            let mut traces = Vec::new();
            for &kind in kinds.iter() {
                let eval = eval_task_generation(
                    &params,
                    kind,
                    cfg.eval_instances,
                    cfg.seed,
                    decode_cfg,
                )?;
                traces.extend(eval.traces);
            }
            traces
        }
        TaskSpec::Text => {
            let mut traces = Vec::new();
            for seq in seqs.iter() {
                let prompt = &seq.tokens[..eval_block.min(seq.len())];
                let out = crate::decoder::generate(&params, prompt, decode_cfg)?;
                traces.push(out.trace);
            }
            traces
        }
    };
    let decode_steps = trace_position_steps(&traces)?;

    let skip = match &cfg.task {
        TaskSpec::Synthetic(_) => PROMPT_WIDTH,
        TaskSpec::Text => 0,
    };
    let mut series: Vec<f64> = loss.per_position[skip..].to_vec();
    while series.last().is_some_and(|x| !x.is_finite()) {
        series.pop();
    }
    let max_lag = (series.len().saturating_sub(1)).min(4 * cfg.train_block_size);
    let autocorr = autocorrelation(&series, max_lag)?;

    Ok(ProfileReport {
        loss,
        decode_steps,
        autocorr,
        skip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn autocorrelation_peaks_at_the_period() {
        let series: Vec<f64> = (0..64).map(|i| ((i % 8) as f64) * 0.1).collect();
        let r = autocorrelation(&series, 16).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        let peak = (1..=16).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
        assert_eq!(peak, 8);
        assert!(r[8] > r[4]);
    }

    #[test]
    fn autocorrelation_rejects_bad_series() {
        assert!(autocorrelation(&[1.0], 0).is_err());
        assert!(autocorrelation(&[1.0, f64::NAN, 2.0], 1).is_err());
        assert!(autocorrelation(&[2.0; 8], 3).is_err());
        assert!(autocorrelation(&[1.0, 2.0, 3.0], 5).is_err());
    }

    #[test]
    fn profiles_cover_only_maskable_positions() {
        let cfg = crate::model::ModelConfig {
            vocab: 259,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 32,
            max_positions: 64,
            token_shift: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = crate::model::ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let vocab = Vocabulary::new();
        let inst = gen_synthetic_at(crate::corpus::TaskKind::Copy, 1, 0);
        let seq = pack_task(&inst, &inst.target, &vocab, 32, 4).unwrap();
        let schedule = MaskSchedule::uniform(4);
        let prof = loss_profiles(
            &params,
            &[seq.clone()],
            &schedule,
            LayoutKind::BlockClean,
            CleanContext::BlockCausal,
            6,
            0,
        )
        .unwrap();
        assert_eq!(prof.per_position.len(), 32);
        for pos in 0..PROMPT_WIDTH {
            assert_eq!(prof.counts[pos], 0, "prompt is never masked");
            assert!(prof.per_position[pos].is_nan());
        }
        let eligible: Vec<usize> = (0..32).filter(|&p| seq.eligible(p, &vocab)).collect();
        for &pos in &eligible {
            assert!(prof.counts[pos] > 0, "position {pos} never sampled");
            assert!(prof.per_position[pos].is_finite());
        }
        assert_eq!(prof.in_block.len(), 4);
    }

    #[test]
    fn profile_sequences_match_the_task_spec() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval_instances = 4;
        cfg.seq_len = 32;
        cfg.train_block_size = 4;
        let seqs = profile_sequences(&cfg).unwrap();
        assert_eq!(seqs.len(), 4);
        assert!(seqs.iter().all(|s| s.len() == 32 && s.prompt_len == PROMPT_WIDTH));

        cfg.task = TaskSpec::Text;
        cfg.text_bytes = 2048;
        let seqs = profile_sequences(&cfg).unwrap();
        assert_eq!(seqs.len(), 4);
        assert!(seqs.iter().all(|s| s.prompt_len == 0));
    }
}
