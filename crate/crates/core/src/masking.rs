//! Token masking for diffusion-LM training.
//!
//! A noise level `t` in (0, 1] picks how many of the `L'` positions in each
//! block get replaced by the mask token: `k = round(t * L')`, clamped to
//! `[1, L']`, with round-half-away-from-zero. Which positions are masked is
//! controlled by a schedule:
//!
//! * `uniform` — k positions uniformly without replacement;
//! * `position_dependent` — position `i` (1-based within the block) gets
//!   weight `w_i(t) = exp(beta * (1 - t) * i)`, so at low noise the masks
//!   concentrate near the block end; sampled without replacement via
//!   Gumbel-top-k, which realizes Plackett-Luce sampling;
//! * `right_to_left` — deterministically the rightmost k positions.
//!
//! Steepness comes from a half-life ratio `lambda = ln 2 / (beta * L')`:
//! the fraction of the block over which a position's weight halves as you
//! move left. `lambda = inf` means `beta = 0`, i.e. uniform.

use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Uniform,
    PositionDependent,
    RightToLeft,
}

impl MaskMode {
    pub fn name(&self) -> &'static str {
        match self {
            MaskMode::Uniform => "uniform",
            MaskMode::PositionDependent => "position_dependent",
            MaskMode::RightToLeft => "right_to_left",
        }
    }

    pub fn parse(s: &str) -> Option<MaskMode> {
        [MaskMode::Uniform, MaskMode::PositionDependent, MaskMode::RightToLeft]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// How sequences are corrupted during dLM training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub mode: MaskMode,
    /// Half-life ratio `lambda` in (0, 1], or `f64::INFINITY` for the
    /// uniform limit. Only consulted in `position_dependent` mode.
    pub half_life_ratio: f64,
    /// Block length `L'` this schedule applies to.
    pub block_size: usize,
    /// When set, each block redraws its own noise level instead of sharing
    /// the per-sequence draw.
    pub per_block_t: bool,
}

impl MaskSchedule {
    pub fn new(mode: MaskMode, half_life_ratio: f64, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Masking("block_size must be positive".into()));
        }
        if !(half_life_ratio > 0.0) {
            return Err(Error::Masking(format!(
                "half_life_ratio must be positive, got {half_life_ratio}"
            )));
        }
        Ok(MaskSchedule {
            mode,
            half_life_ratio,
            block_size,
            per_block_t: false,
        })
    }

    pub fn uniform(block_size: usize) -> Self {
        MaskSchedule::new(MaskMode::Uniform, f64::INFINITY, block_size).unwrap()
    }
}

/// One corruption of a sequence: the noise level used for each block, the
/// masked positions, and the corrupted token string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseInstance {
    /// The clean sequence this instance corrupts.
    pub seq: TokenSequence,
    /// Effective noise level per block: the realized mask fraction
    /// `k / eligible`, which the drawn level rounds to once the block's
    /// mask count is fixed. Blocks with nothing to mask keep the drawn
    /// level (no position references it). The denoising loss weights each
    /// masked position by the reciprocal of this value.
    pub block_t: Vec<f64>,
    /// Masked positions per block as sorted 1-based in-block offsets.
    /// Blocks with no eligible positions (pure prompt or padding) are empty.
    pub masked: Vec<Vec<usize>>,
    /// `seq.tokens` with `mask_id` substituted at every masked position.
    pub corrupted: Vec<TokenId>,
}

impl NoiseInstance {
    /// Masked positions as sorted absolute sequence indices.
    pub fn masked_abs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (b, rels) in self.masked.iter().enumerate() {
            let start = b * self.seq.block_size;
            out.extend(rels.iter().map(|rel| start + rel - 1));
        }
        out
    }

    /// Total number of masked positions.
    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }
}

/// Draws a noise level uniformly from (0, 1]. Draws that would be exactly
/// zero are rejected and redrawn.
pub fn sample_noise_level(rng: &mut impl Rng) -> f64 {
    loop {
        // gen::<f64>() covers [0, 1), so 1 - u covers (0, 1].
        let t = 1.0 - rng.gen::<f64>();
        if t > 0.0 {
            return t;
        }
    }
}

/// Number of masked positions for noise level `t` in a block of length
/// `l_prime`: `round(t * l_prime)` half-away-from-zero, clamped to
/// `[1, l_prime]` so every block keeps at least one masked position.
pub fn mask_count(t: f64, l_prime: usize) -> usize {
    let k = (t * l_prime as f64).round() as i64;
    k.clamp(1, l_prime as i64) as usize
}

/// Converts a half-life ratio to the weight steepness `beta`:
/// `beta = ln 2 / (lambda * l_prime)`, with `lambda = inf` mapping to 0.
pub fn half_life_to_beta(lambda: f64, l_prime: usize) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Masking(format!(
            "half-life ratio must be positive, got {lambda}"
        )));
    }
    if lambda.is_infinite() {
        return Ok(0.0);
    }
    Ok(std::f64::consts::LN_2 / (lambda * l_prime as f64))
}

/// Unnormalized masking weights `w_i(t) = exp(beta * (1 - t) * i)` for
/// 1-based in-block positions `i = 1..=l_prime`.
pub fn position_weights(t: f64, beta: f64, l_prime: usize) -> Vec<f64> {
    (1..=l_prime)
        .map(|i| (beta * (1.0 - t) * i as f64).exp())
        .collect()
}

/// Samples the indices of `k` items without replacement, proportional to
/// `weights`, via Gumbel-top-k: the k largest `ln w_i + g_i` with standard
/// Gumbel noise `g_i = -ln(-ln u_i)`, `u_i` open in (0, 1). Equivalent to
/// sequential Plackett-Luce sampling. Returns indices into `weights`.
pub fn gumbel_top_k(weights: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > weights.len() {
        return Err(Error::Masking(format!(
            "cannot draw {k} items from {} weights",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Masking(format!("weight {w} is not positive and finite")));
    }
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            let gumbel = -(-u.ln()).ln();
            (w.ln() + gumbel, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    Ok(keyed[..k].iter().map(|&(_, i)| i).collect())
}

/// Corrupts a sequence under a schedule at shared noise level `t` (each
/// block redraws its own level when `per_block_t` is set). Prompt and pad
/// positions are never masked; blocks containing only such positions stay
/// untouched. Errors if the whole sequence has nothing to mask or if the
/// schedule's block size disagrees with the sequence's.
///
/// The recorded per-block level is the realized mask fraction
/// `k / eligible` rather than the raw draw: the mask count already rounds
/// the draw to that fraction, and weighting by the reciprocal of the
/// *drawn* level would blow up whenever a near-zero draw rounds up to one
/// masked token (a single item would then carry weight `1/t` with `t`
/// arbitrarily small, which at small scale dominates whole batches).
/// Position-dependent selection weights still use the raw draw.
pub fn corrupt(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    schedule: &MaskSchedule,
    t: f64,
    rng: &mut impl Rng,
) -> Result<NoiseInstance> {
    if schedule.block_size != seq.block_size {
        return Err(Error::Masking(format!(
            "schedule block_size {} != sequence block_size {}",
            schedule.block_size, seq.block_size
        )));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Masking(format!("noise level {t} outside (0, 1]")));
    }
    let l_prime = seq.block_size;
    let mut corrupted = seq.tokens.clone();
    let mut masked = Vec::with_capacity(seq.num_blocks());
    let mut block_t = Vec::with_capacity(seq.num_blocks());
    for b in 0..seq.num_blocks() {
        let t_b = if schedule.per_block_t {
            sample_noise_level(rng)
        } else {
            t
        };
        let range = seq.block_range(b);
        let start = range.start;
        // 1-based in-block offsets of positions that may be masked.
        let eligible: Vec<usize> = range
            .filter(|&p| seq.eligible(p, vocab))
            .map(|p| p - start + 1)
            .collect();
        if eligible.is_empty() {
            block_t.push(t_b);
            masked.push(Vec::new());
            continue;
        }
        let k = mask_count(t_b, l_prime).min(eligible.len());
        block_t.push(k as f64 / eligible.len() as f64);
        let mut rels: Vec<usize> = match schedule.mode {
            MaskMode::Uniform => rand::seq::index::sample(rng, eligible.len(), k)
                .iter()
                .map(|j| eligible[j])
                .collect(),
            MaskMode::PositionDependent => {
                let beta = half_life_to_beta(schedule.half_life_ratio, l_prime)?;
                let weights = position_weights(t_b, beta, l_prime);
                let w_eligible: Vec<f64> = eligible.iter().map(|&rel| weights[rel - 1]).collect();
                gumbel_top_k(&w_eligible, k, rng)?
                    .into_iter()
                    .map(|j| eligible[j])
                    .collect()
            }
            MaskMode::RightToLeft => eligible[eligible.len() - k..].to_vec(),
        };
        rels.sort_unstable();
        for &rel in &rels {
            corrupted[start + rel - 1] = vocab.mask_id;
        }
        masked.push(rels);
    }
    if masked.iter().all(Vec::is_empty) {
        return Err(Error::Masking(
            "sequence has no eligible (non-prompt, non-pad) positions".into(),
        ));
    }
    Ok(NoiseInstance {
        seq: seq.clone(),
        block_t,
        masked,
        corrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pack_instance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_seq() -> (Vocabulary, TokenSequence) {
        let v = Vocabulary::new();
        // 32 tokens, prompt 16, blocks of 8: block 2 fully trainable,
        // block 3 is "ijk" + eos + padding.
        let seq = pack_instance("abc|", "abcdefghijk", &v, 32, 8, 16).unwrap();
        (v, seq)
    }

    #[test]
    fn mask_count_rounding_and_clamping() {
        assert_eq!(mask_count(0.5, 8), 4);
        assert_eq!(mask_count(0.01, 8), 1); // clamped up
        assert_eq!(mask_count(1.0, 8), 8);
        // 0.3125 * 8 = 2.5 rounds away from zero.
        assert_eq!(mask_count(0.3125, 8), 3);
        assert_eq!(mask_count(0.9999, 4), 4);
    }

    #[test]
    fn beta_from_half_life() {
        let beta = half_life_to_beta(0.1, 8).unwrap();
        assert!((beta - std::f64::consts::LN_2 / 0.8).abs() < 1e-15);
        assert_eq!(half_life_to_beta(f64::INFINITY, 8).unwrap(), 0.0);
        assert!(half_life_to_beta(0.0, 8).is_err());
        assert!(half_life_to_beta(-1.0, 8).is_err());
        assert!(half_life_to_beta(f64::NAN, 8).is_err());
    }

    #[test]
    fn weights_double_per_position_at_zero_noise() {
        // As t -> 0 with beta = ln 2, w_i = 2^i.
        let w = position_weights(0.0, std::f64::consts::LN_2, 4);
        for (i, &wi) in w.iter().enumerate() {
            let expect = 2f64.powi(i as i32 + 1);
            assert!(
                (wi - expect).abs() / expect < 1e-12,
                "w[{i}] = {wi}, expected {expect}"
            );
        }
        // At full noise the weights flatten to 1 regardless of beta.
        assert!(position_weights(1.0, 3.0, 6).iter().all(|&w| w == 1.0));
        // beta = 0 is uniform at any t.
        assert!(position_weights(0.25, 0.0, 6).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn noise_level_stays_in_half_open_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = 0.0;
        let n = 200_000;
        for _ in 0..n {
            let t = sample_noise_level(&mut rng);
            assert!(t > 0.0 && t <= 1.0);
            sum += t;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gumbel_matches_simple_marginal() {
        // With weights [1,1,1,3] and k = 1, the last index wins with
        // probability 3/6 = 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = [1.0, 1.0, 1.0, 3.0];
        let n = 100_000;
        let mut hits = 0;
        for _ in 0..n {
            if gumbel_top_k(&weights, 1, &mut rng).unwrap()[0] == 3 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        assert!((p - 0.5).abs() < 0.01, "p = {p}");
    }

    #[test]
    fn gumbel_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(gumbel_top_k(&[1.0, 2.0], 3, &mut rng).is_err());
        assert!(gumbel_top_k(&[1.0, 0.0], 1, &mut rng).is_err());
        assert!(gumbel_top_k(&[1.0, -2.0], 1, &mut rng).is_err());
        assert!(gumbel_top_k(&[1.0, f64::INFINITY], 1, &mut rng).is_err());
        assert_eq!(gumbel_top_k(&[1.0, 2.0], 0, &mut rng).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn corrupt_masks_only_eligible_positions() {
        let (v, seq) = toy_seq();
        let schedule = MaskSchedule::uniform(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &t in &[0.11, 0.5, 0.77, 1.0] {
            let noise = corrupt(&seq, &v, &schedule, t, &mut rng).unwrap();
            assert_eq!(noise.masked.len(), 4);
            // Prompt blocks untouched.
            assert!(noise.masked[0].is_empty() && noise.masked[1].is_empty());
            // Fully-trainable block masks exactly k positions.
            assert_eq!(noise.masked[2].len(), mask_count(t, 8));
            // Partially-padded block caps at its eligible count (4: "ijk"+eos).
            assert_eq!(noise.masked[3].len(), mask_count(t, 8).min(4));
            assert!(noise.masked[3].iter().all(|&rel| rel <= 4));
            // Corruption replaces exactly the masked set with mask_id.
            for (p, (&orig, &cor)) in seq.tokens.iter().zip(&noise.corrupted).enumerate() {
                let is_masked = noise.masked_abs().contains(&p);
                assert_eq!(cor, if is_masked { v.mask_id } else { orig });
                if is_masked {
                    assert!(seq.eligible(p, &v), "masked ineligible position {p}");
                }
            }
        }
    }

    #[test]
    fn full_noise_masks_every_eligible_position() {
        let (v, seq) = toy_seq();
        let schedule = MaskSchedule::uniform(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = corrupt(&seq, &v, &schedule, 1.0, &mut rng).unwrap();
        let eligible: Vec<usize> = (0..seq.len()).filter(|&p| seq.eligible(p, &v)).collect();
        assert_eq!(noise.masked_abs(), eligible);
    }

    #[test]
    fn right_to_left_is_deterministic_suffix() {
        let (v, seq) = toy_seq();
        let schedule = MaskSchedule::new(MaskMode::RightToLeft, f64::INFINITY, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // t = 0.25 gives k = 2: rightmost two eligible positions per block.
        let noise = corrupt(&seq, &v, &schedule, 0.25, &mut rng).unwrap();
        assert_eq!(noise.masked[2], vec![7, 8]);
        assert_eq!(noise.masked[3], vec![3, 4]); // eos block: "ijk"+eos occupy rel 1..=4
    }

    #[test]
    fn corrupt_rejects_degenerate_inputs() {
        let (v, seq) = toy_seq();
        let schedule = MaskSchedule::uniform(4); // mismatched block size
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(corrupt(&seq, &v, &schedule, 0.5, &mut rng).is_err());
        let schedule = MaskSchedule::uniform(8);
        assert!(corrupt(&seq, &v, &schedule, 0.0, &mut rng).is_err());
        assert!(corrupt(&seq, &v, &schedule, 1.5, &mut rng).is_err());
    }

    #[test]
    fn per_block_noise_draws_vary() {
        let (v, seq) = toy_seq();
        let mut schedule = MaskSchedule::uniform(8);
        schedule.per_block_t = true;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = corrupt(&seq, &v, &schedule, 0.5, &mut rng).unwrap();
        assert_eq!(noise.block_t.len(), 4);
        assert!(noise.block_t.windows(2).any(|w| w[0] != w[1]));
        // Shared mode: every block rounds the same sequence-level draw to
        // its own realized fraction. The full block masks 4 of 8; the tail
        // block has only 4 eligible positions, so the same count covers
        // them all. Prompt-only blocks keep the draw.
        schedule.per_block_t = false;
        let noise = corrupt(&seq, &v, &schedule, 0.5, &mut rng).unwrap();
        assert_eq!(noise.block_t, vec![0.5, 0.5, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn corrupt_invariants_hold(
            t in 0.001f64..=1.0,
            seed in 0u64..1000,
            mode_idx in 0usize..3,
        ) {
            let (v, seq) = toy_seq();
            let mode = [MaskMode::Uniform, MaskMode::PositionDependent, MaskMode::RightToLeft][mode_idx];
            let schedule = MaskSchedule::new(mode, 0.25, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = corrupt(&seq, &v, &schedule, t, &mut rng).unwrap();
            // Masked sets are sorted, in-range, and sized by mask_count
            // capped to the eligible count.
            for (b, rels) in noise.masked.iter().enumerate() {
                prop_assert!(rels.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(rels.iter().all(|&rel| (1..=8).contains(&rel)));
                let eligible = seq
                    .block_range(b)
                    .filter(|&p| seq.eligible(p, &v))
                    .count();
                prop_assert_eq!(rels.len(), mask_count(t, 8).min(eligible));
            }
            // Same seed reproduces the same corruption.
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let again = corrupt(&seq, &v, &schedule, t, &mut rng2).unwrap();
            prop_assert_eq!(noise, again);
        }
    }
}
