//! The training objectives: next-token (AR) loss and the block-diffusion
//! denoising loss, expressed as (tokens per row, layout, scored items)
//! triples fed to the shared forward/backward core.

use super::forward::{sequence_loss, sequence_loss_grad, LossItem};
use super::{ModelParams, Scalar};
use crate::attention::{
    bidirectional_layout, block_clean_layout, block_noisy_layout, causal_layout, AttentionLayout,
    CleanContext, LayoutKind,
};
use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::NoiseInstance;

/// Rows, layout, and scored items for the AR objective: every non-pad
/// position with a predecessor is predicted from the previous row under
/// causal attention.
pub fn ar_inputs(
    seq: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<(Vec<TokenId>, AttentionLayout, Vec<LossItem>)> {
    let l = seq.len();
    let items: Vec<LossItem> = (1..l)
        .filter(|&pos| seq.tokens[pos] != vocab.pad_id)
        .map(|pos| LossItem {
            row: pos - 1,
            target: seq.tokens[pos],
            weight: 1.0,
        })
        .collect();
    if items.is_empty() {
        return Err(Error::Model(
            "sequence has no non-pad targets for the AR loss".into(),
        ));
    }
    let rows: Vec<usize> = items.iter().map(|it| it.row).collect();
    let layout = causal_layout(l)?.with_loss_rows(rows)?;
    Ok((seq.tokens.clone(), layout, items))
}

/// Mean next-token NLL over non-pad targets under causal attention.
pub fn ar_loss<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<f64> {
    let (tokens, layout, items) = ar_inputs(seq, vocab)?;
    sequence_loss(params, &tokens, &layout, &items)
}

/// [`ar_loss`] plus gradient accumulation (see [`sequence_loss_grad`]).
pub fn ar_loss_grad<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    grads: &mut ModelParams<F>,
    grad_scale: f64,
) -> Result<f64> {
    let (tokens, layout, items) = ar_inputs(seq, vocab)?;
    sequence_loss_grad(params, &tokens, &layout, &items, grads, grad_scale)
}

/// Rows, layout, and scored items for the denoising objective over one
/// corruption draw.
///
/// Masked positions are scored against the original tokens with weight
/// `1/t` (their block's noise level). With `token_shift` the prediction for
/// masked position `i` is read from row `i-1` in the corrupted stream; a
/// masked first position has no predecessor and is excluded (logged).
/// `block_clean` stacks the corrupted stream on top of a clean copy of the
/// sequence and scores only corrupted-stream rows.
pub fn dlm_inputs(
    noise: &NoiseInstance,
    kind: LayoutKind,
    token_shift: bool,
    clean_ctx: CleanContext,
) -> Result<(Vec<TokenId>, AttentionLayout, Vec<LossItem>)> {
    let seq = &noise.seq;
    let (l, l_prime) = (seq.len(), seq.block_size);
    let mut items = Vec::with_capacity(noise.masked_count());
    for b in 0..seq.num_blocks() {
        let weight = 1.0 / noise.block_t[b];
        for &rel in &noise.masked[b] {
            let pos = b * l_prime + (rel - 1);
            if token_shift && pos == 0 {
                log::warn!("token_shift drops masked position 0 (no predecessor row)");
                continue;
            }
            items.push(LossItem {
                row: if token_shift { pos - 1 } else { pos },
                target: seq.tokens[pos],
                weight,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Model(
            "corruption left no scoreable masked positions".into(),
        ));
    }
    items.sort_by_key(|it| it.row);
    let rows: Vec<usize> = items.iter().map(|it| it.row).collect();
    let (tokens, layout) = match kind {
        LayoutKind::Causal => {
            return Err(Error::Model(
                "causal layout belongs to the AR objective, not the denoising loss".into(),
            ))
        }
        LayoutKind::Bidirectional => (noise.corrupted.clone(), bidirectional_layout(l)?),
        LayoutKind::BlockNoisy => (noise.corrupted.clone(), block_noisy_layout(l, l_prime)?),
        LayoutKind::BlockClean => {
            let mut tokens = noise.corrupted.clone();
            tokens.extend_from_slice(&seq.tokens);
            (tokens, block_clean_layout(l, l_prime, clean_ctx)?)
        }
    };
    Ok((tokens, layout.with_loss_rows(rows)?, items))
}

/// Denoising loss: `1/t`-weighted mean NLL over masked positions, under the
/// selected attention pattern (block-causal clean context).
pub fn dlm_loss<F: Scalar>(
    params: &ModelParams<F>,
    noise: &NoiseInstance,
    kind: LayoutKind,
) -> Result<f64> {
    let (tokens, layout, items) = dlm_inputs(
        noise,
        kind,
        params.config.token_shift,
        CleanContext::BlockCausal,
    )?;
    sequence_loss(params, &tokens, &layout, &items)
}

/// [`dlm_loss`] plus gradient accumulation (see [`sequence_loss_grad`]).
pub fn dlm_loss_grad<F: Scalar>(
    params: &ModelParams<F>,
    noise: &NoiseInstance,
    kind: LayoutKind,
    grads: &mut ModelParams<F>,
    grad_scale: f64,
) -> Result<f64> {
    let (tokens, layout, items) = dlm_inputs(
        noise,
        kind,
        params.config.token_shift,
        CleanContext::BlockCausal,
    )?;
    sequence_loss_grad(params, &tokens, &layout, &items, grads, grad_scale)
}
