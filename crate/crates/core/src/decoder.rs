//! Block-wise generation with a key/value cache and confidence-thresholded
//! parallel decoding.
//!
//! Generation proceeds one block of `eval_block_size` positions at a time.
//! Committed blocks and the prompt live in the cache as clean context; the
//! current block is repeatedly denoised: each forward scores every still-
//! masked position, and every position whose confidence clears the threshold
//! commits its argmax token (always at least the single most confident one,
//! so every step makes progress). Once a block is fully committed it is
//! re-encoded once as clean rows to extend the cache.
//!
//! Accounting separates the two kinds of forwards: `forwards` (NFE) counts
//! denoising steps only, while cache refreshes are reported as
//! `refresh_forwards`. Tokens-per-forward is `decoded_tokens / forwards`,
//! and positions eos-filled behind a committed end-of-sequence token are
//! excluded from `decoded_tokens` so the counting identities stay exact.

use serde::Serialize;

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::forward::{linear, rms_inv, rmsnorm_apply, rope_rotate, silu};
use crate::model::{axpy, dot, Mat, ModelParams, Scalar};

/// How a still-masked position's confidence is measured from its
/// probability distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Probability of the argmax token (the default).
    TopProb,
    /// Gap between the top two probabilities.
    Margin,
    /// One minus the entropy of the distribution, normalized to [0, 1].
    NegEntropy,
}

impl ConfidenceMeasure {
    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMeasure::TopProb => "top_prob",
            ConfidenceMeasure::Margin => "margin",
            ConfidenceMeasure::NegEntropy => "neg_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top_prob" => Ok(ConfidenceMeasure::TopProb),
            "margin" => Ok(ConfidenceMeasure::Margin),
            "neg_entropy" => Ok(ConfidenceMeasure::NegEntropy),
            other => Err(Error::Config(format!(
                "unknown confidence measure '{other}' (expected top_prob, margin, or neg_entropy)"
            ))),
        }
    }
}

/// Settings for one generation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeConfig {
    /// Block width used at generation time; may differ from the width the
    /// model was trained with.
    pub eval_block_size: usize,
    /// Commit every position whose confidence reaches this value. `None` is
    /// the "off" sentinel: exactly one token commits per step.
    pub confidence_threshold: Option<f64>,
    /// Requested generation budget; rounded up internally to a whole number
    /// of blocks.
    pub max_new_tokens: usize,
    /// 0.0 decodes greedily. Positive values flatten (>1) or sharpen (<1)
    /// the probabilities that feed the confidence measure; the committed
    /// token is the argmax either way.
    pub temperature: f64,
    /// Confidence measure; `TopProb` unless an experiment says otherwise.
    pub confidence: ConfidenceMeasure,
    /// Token that ends generation early; `None` always runs to the budget.
    pub eos_id: Option<TokenId>,
    /// Placeholder fed to the model at uncommitted positions.
    pub mask_id: TokenId,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let vocab = Vocabulary::new();
        DecodeConfig {
            eval_block_size: 8,
            confidence_threshold: None,
            max_new_tokens: 64,
            temperature: 0.0,
            confidence: ConfidenceMeasure::TopProb,
            eos_id: Some(vocab.eos_id),
            mask_id: vocab.mask_id,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_block_size == 0 {
            return Err(Error::Config("eval_block_size must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if let Some(tau) = self.confidence_threshold {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!(
                    "confidence_threshold {tau} outside [0, 1]"
                )));
            }
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Generation budget rounded up to a whole number of blocks.
    pub fn rounded_max_new_tokens(&self) -> usize {
        let l = self.eval_block_size;
        self.max_new_tokens.div_ceil(l) * l
    }
}

/// Per-layer attention keys and values for all clean context rows, stored
/// with rotary phases already applied.
#[derive(Debug, Clone)]
struct LayerKv<F: Scalar> {
    k: Mat<F>,
    v: Mat<F>,
}

/// Clean-context cache covering the prompt plus every finalized block.
#[derive(Debug, Clone)]
pub struct KvCache<F: Scalar> {
    layers: Vec<LayerKv<F>>,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    k: Mat::zeros(0, d_model),
                    v: Mat::zeros(0, d_model),
                })
                .collect(),
            len: 0,
        }
    }

    /// Number of context rows currently cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// State of one in-progress generation.
#[derive(Debug, Clone)]
pub struct DecodeState<F: Scalar> {
    pub cfg: DecodeConfig,
    cache: KvCache<F>,
    pub prompt_len: usize,
    /// Tokens of the block being denoised; uncommitted holes hold `mask_id`.
    pub current_block: Vec<TokenId>,
    /// True where `current_block` holds a committed token (tracked apart
    /// from token values so a model that emits `mask_id` cannot confuse
    /// completion detection).
    committed: Vec<bool>,
    /// Absolute position of the current block's first token.
    block_start: usize,
    /// Committed tokens of all finalized blocks, in order.
    pub generated: Vec<TokenId>,
    /// Per generated position: the NFE at which it was committed.
    pub decoded_step: Vec<Option<usize>>,
    /// Per generated position: confidence at commit time.
    pub confidences: Vec<Option<f64>>,
    /// Per generated position: true if eos-filled behind a committed eos.
    filled: Vec<bool>,
    /// Number of denoising forwards (NFE).
    pub forwards: usize,
    /// Clean re-encoding forwards, reported separately from NFE.
    pub refresh_forwards: usize,
    /// Committed tokens, excluding eos auto-fills.
    pub decoded_tokens: usize,
    pub finished: bool,
    eos_committed: bool,
    /// Under token-shifted prediction, the first position of each block is
    /// read from the last context row; its logits are stashed here by the
    /// prompt pass and each cache refresh.
    shift_stash: Option<Vec<F>>,
    rounded_max: usize,
}

impl<F: Scalar> DecodeState<F> {
    /// True once every position of the current block is committed.
    pub fn block_complete(&self) -> bool {
        self.committed.iter().all(|&c| c)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    fn push_block_slots(&mut self) {
        let l = self.cfg.eval_block_size;
        self.current_block = vec![self.cfg.mask_id; l];
        self.committed = vec![false; l];
        self.decoded_step.extend(std::iter::repeat(None).take(l));
        self.confidences.extend(std::iter::repeat(None).take(l));
        self.filled.extend(std::iter::repeat(false).take(l));
    }

    /// Tokens produced so far, truncated before the first eos if one
    /// committed.
    pub fn output_tokens(&self) -> Vec<TokenId> {
        let mut out = self.generated.clone();
        if let Some(eos) = self.cfg.eos_id {
            if let Some(at) = out.iter().position(|&t| t == eos) {
                out.truncate(at);
            }
        }
        out
    }

    pub fn trace(&self) -> DecodeTrace {
        let positions = self
            .generated
            .iter()
            .enumerate()
            .map(|(i, &token)| PositionTrace {
                position: i,
                token,
                step: self.decoded_step[i].expect("finalized position without a step"),
                confidence: self.confidences[i].expect("finalized position without a confidence"),
                filled: self.filled[i],
            })
            .collect();
        DecodeTrace {
            prompt_len: self.prompt_len,
            eval_block_size: self.cfg.eval_block_size,
            confidence_threshold: self.cfg.confidence_threshold,
            positions,
            nfe: self.forwards,
            refresh_forwards: self.refresh_forwards,
            decoded_tokens: self.decoded_tokens,
            tpf: if self.forwards == 0 {
                0.0
            } else {
                self.decoded_tokens as f64 / self.forwards as f64
            },
        }
    }
}

/// One generated position in a [`DecodeTrace`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionTrace {
    /// Offset from the end of the prompt.
    pub position: usize,
    pub token: TokenId,
    /// NFE at which the position committed.
    pub step: usize,
    /// Confidence at commit time; 0.0 for eos fills.
    pub confidence: f64,
    /// True if the position was eos-filled behind a committed eos rather
    /// than decoded.
    pub filled: bool,
}

/// JSON-serializable record of one generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub eval_block_size: usize,
    pub confidence_threshold: Option<f64>,
    pub positions: Vec<PositionTrace>,
    /// Denoising forwards only.
    pub nfe: usize,
    /// Clean re-encoding forwards, excluded from `nfe`.
    pub refresh_forwards: usize,
    /// Committed tokens, excluding eos auto-fills.
    pub decoded_tokens: usize,
    /// `decoded_tokens / nfe`.
    pub tpf: f64,
}

/// Tokens plus the full per-position record of how they were decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Runs the network over `tokens` placed at absolute positions starting at
/// `start_pos`, attending to every cached context row plus the new rows
/// themselves (bidirectionally). With `commit` set, the new rows' keys and
/// values are appended to the cache as clean context.
///
/// Key order — cached rows first, then the new rows in position order —
/// matches a full forward over the equivalent layout, so cached and
/// cache-free evaluation agree to the last bit at a given precision.
fn forward_over_cache<F: Scalar>(
    params: &ModelParams<F>,
    cache: &mut KvCache<F>,
    tokens: &[TokenId],
    start_pos: usize,
    commit: bool,
) -> Result<Mat<F>> {
    let cfg = &params.config;
    let n = tokens.len();
    let (d, n_heads) = (cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    if n == 0 {
        return Err(Error::Decode("empty row chunk".into()));
    }
    if start_pos + n > cfg.max_positions {
        return Err(Error::Decode(format!(
            "positions {}..{} exceed max_positions {}",
            start_pos,
            start_pos + n,
            cfg.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Decode(format!(
            "token {t} out of vocabulary {}",
            cfg.vocab
        )));
    }

    let mut h = Mat::from_fn(n, d, |r, c| params.embed.row(tokens[r] as usize)[c]);
    for (li, layer) in params.layers.iter().enumerate() {
        let h_in = h;
        let inv_attn: Vec<f64> = (0..n).map(|r| rms_inv(h_in.row(r))).collect();
        let mut a_n = Mat::zeros(n, d);
        for r in 0..n {
            rmsnorm_apply(h_in.row(r), inv_attn[r], layer.attn_norm.row(0), a_n.row_mut(r));
        }
        let mut q_rot = linear(&a_n, &layer.wq);
        let mut k_rot = linear(&a_n, &layer.wk);
        let v = linear(&a_n, &layer.wv);
        for r in 0..n {
            let pos = start_pos + r;
            rope_rotate(q_rot.row_mut(r), pos, n_heads, 1.0);
            rope_rotate(k_rot.row_mut(r), pos, n_heads, 1.0);
        }

        let kv = &cache.layers[li];
        let cached = kv.k.shape().0;
        let mut ctx = Mat::zeros(n, d);
        let mut scores: Vec<F> = Vec::with_capacity(cached + n);
        for head in 0..n_heads {
            let span = head * dh..(head + 1) * dh;
            for qi in 0..n {
                let qv = &q_rot.row(qi)[span.clone()];
                scores.clear();
                for k in 0..cached {
                    scores.push(dot(qv, &kv.k.row(k)[span.clone()]) * scale);
                }
                for k in 0..n {
                    scores.push(dot(qv, &k_rot.row(k)[span.clone()]) * scale);
                }
                let max = scores
                    .iter()
                    .copied()
                    .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
                let mut sum = F::zero();
                for s in &mut scores {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let ctx_row = &mut ctx.row_mut(qi)[span.clone()];
                for k in 0..cached {
                    axpy(ctx_row, scores[k] / sum, &kv.v.row(k)[span.clone()]);
                }
                for k in 0..n {
                    axpy(ctx_row, scores[cached + k] / sum, &v.row(k)[span.clone()]);
                }
            }
        }
        let attn_out = linear(&ctx, &layer.wo);
        let mut h_mid = h_in.clone();
        for i in 0..h_mid.data.len() {
            h_mid.data[i] += attn_out.data[i];
        }

        let inv_ffn: Vec<f64> = (0..n).map(|r| rms_inv(h_mid.row(r))).collect();
        let mut f_n = Mat::zeros(n, d);
        for r in 0..n {
            rmsnorm_apply(h_mid.row(r), inv_ffn[r], layer.ffn_norm.row(0), f_n.row_mut(r));
        }
        let u = linear(&f_n, &layer.w_up);
        let s = Mat::from_fn(n, cfg.d_ffn, |r, c| silu(u.row(r)[c]));
        let ffn_out = linear(&s, &layer.w_down);
        let mut h_out = h_mid;
        for i in 0..h_out.data.len() {
            h_out.data[i] += ffn_out.data[i];
        }
        if !h_out.all_finite() {
            return Err(Error::NonFinite {
                site: format!("decode.layers.{li}"),
            });
        }

        if commit {
            let kv = &mut cache.layers[li];
            for r in 0..n {
                kv.k.append_row(k_rot.row(r));
                kv.v.append_row(v.row(r));
            }
        }
        h = h_out;
    }
    if commit {
        cache.len += n;
    }

    let mut x_final = Mat::zeros(n, d);
    for r in 0..n {
        let inv = rms_inv(h.row(r));
        rmsnorm_apply(h.row(r), inv, params.final_norm.row(0), x_final.row_mut(r));
    }
    Ok(x_final)
}

/// Vocabulary logits for one final-hidden row.
fn project_row<F: Scalar>(params: &ModelParams<F>, x: &[F]) -> Result<Vec<F>> {
    let logits: Vec<F> = (0..params.config.vocab)
        .map(|v| dot(params.head.row(v), x))
        .collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            site: "decode.head".into(),
        });
    }
    Ok(logits)
}

/// Softmax in f64, with optional temperature scaling of the logits.
fn softmax_f64<F: Scalar>(logits: &[F], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let vals: Vec<f64> = logits.iter().map(|&x| x.as_f64() / t).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = vals.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

/// Index of the largest value; ties resolve to the lowest index.
fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

fn measure_confidence(probs: &[f64], top: usize, measure: ConfidenceMeasure) -> f64 {
    match measure {
        ConfidenceMeasure::TopProb => probs[top],
        ConfidenceMeasure::Margin => {
            let mut second = f64::NEG_INFINITY;
            for (i, &p) in probs.iter().enumerate() {
                if i != top && p > second {
                    second = p;
                }
            }
            probs[top] - second.max(0.0)
        }
        ConfidenceMeasure::NegEntropy => {
            let h: f64 = probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            1.0 - h / (probs.len() as f64).ln()
        }
    }
}

/// Processes the prompt as clean context and readies the first block.
///
/// The prompt is encoded in chunks split at absolute multiples of
/// `eval_block_size`, each chunk attending to everything already cached plus
/// itself — the same visibility its rows would have as clean context during
/// training. The prompt pass is not counted in `forwards`.
pub fn start<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[TokenId],
    cfg: DecodeConfig,
) -> Result<DecodeState<F>> {
    cfg.validate()?;
    let mcfg = &params.config;
    if prompt.is_empty() {
        return Err(Error::Decode("prompt must be nonempty".into()));
    }
    let rounded_max = cfg.rounded_max_new_tokens();
    if prompt.len() + rounded_max > mcfg.max_positions {
        return Err(Error::Decode(format!(
            "prompt length {} plus budget {} exceeds max_positions {}",
            prompt.len(),
            rounded_max,
            mcfg.max_positions
        )));
    }
    let l = cfg.eval_block_size;
    if prompt.len() % l != 0 {
        log::warn!(
            "prompt length {} is not a multiple of eval_block_size {}; generated blocks will sit off the training block grid",
            prompt.len(),
            l
        );
    }

    let mut cache = KvCache::new(mcfg.n_layers, mcfg.d_model);
    let mut last_rows: Option<Mat<F>> = None;
    let mut chunk_start = 0;
    while chunk_start < prompt.len() {
        let end = (chunk_start + l).min(prompt.len());
        let x = forward_over_cache(params, &mut cache, &prompt[chunk_start..end], chunk_start, true)?;
        last_rows = Some(x);
        chunk_start = end;
    }
    let shift_stash = if mcfg.token_shift {
        let x = last_rows.expect("prompt produced at least one chunk");
        Some(project_row(params, x.row(x.shape().0 - 1))?)
    } else {
        None
    };

    let mut state = DecodeState {
        cfg,
        cache,
        prompt_len: prompt.len(),
        current_block: Vec::new(),
        committed: Vec::new(),
        block_start: prompt.len(),
        generated: Vec::new(),
        decoded_step: Vec::new(),
        confidences: Vec::new(),
        filled: Vec::new(),
        forwards: 0,
        refresh_forwards: 0,
        decoded_tokens: 0,
        finished: false,
        eos_committed: false,
        shift_stash,
        rounded_max,
    };
    state.push_block_slots();
    Ok(state)
}

/// One denoising forward over the current block. Every still-masked position
/// whose confidence reaches the threshold commits its argmax token, and the
/// single most confident position commits unconditionally so each step makes
/// progress. Once an eos token has committed, still-masked positions after
/// the earliest committed eos are filled with more eos — the token those
/// slots hold in every training sequence — and reported as fills, not
/// decoded tokens; positions before the eos keep decoding normally.
pub fn denoise_step<F: Scalar>(params: &ModelParams<F>, state: &mut DecodeState<F>) -> Result<()> {
    if state.finished {
        return Err(Error::Decode("generation already finished".into()));
    }
    let masked: Vec<usize> = (0..state.current_block.len())
        .filter(|&j| !state.committed[j])
        .collect();
    if masked.is_empty() {
        return Err(Error::Decode(
            "current block is fully committed; call finalize_block".into(),
        ));
    }

    let x = forward_over_cache(
        params,
        &mut state.cache,
        &state.current_block,
        state.block_start,
        false,
    )?;

    // Score every still-masked position: argmax token plus confidence.
    let mut cand: Vec<(usize, TokenId, f64)> = Vec::with_capacity(masked.len());
    for &j in &masked {
        let logits: Vec<F> = if params.config.token_shift {
            if j == 0 {
                state
                    .shift_stash
                    .clone()
                    .ok_or_else(|| Error::Decode("missing block-start logits stash".into()))?
            } else {
                project_row(params, x.row(j - 1))?
            }
        } else {
            project_row(params, x.row(j))?
        };
        let probs = softmax_f64(&logits, state.cfg.temperature);
        let top = argmax_f64(&probs);
        let conf = measure_confidence(&probs, top, state.cfg.confidence);
        cand.push((j, top as TokenId, conf));
    }
    let best = argmax_f64(&cand.iter().map(|&(_, _, c)| c).collect::<Vec<f64>>());

    state.forwards += 1;
    let step = state.forwards;
    let base = state.generated.len();
    let mut eos_hit = false;
    for (i, &(j, tok, conf)) in cand.iter().enumerate() {
        let take = match state.cfg.confidence_threshold {
            Some(tau) => i == best || conf >= tau,
            None => i == best,
        };
        if !take {
            continue;
        }
        state.current_block[j] = tok;
        state.committed[j] = true;
        state.decoded_step[base + j] = Some(step);
        state.confidences[base + j] = Some(conf);
        state.decoded_tokens += 1;
        if state.cfg.eos_id == Some(tok) {
            eos_hit = true;
        }
    }

    if eos_hit {
        state.eos_committed = true;
    }
    if state.eos_committed {
        // Everything after the earliest committed eos holds eos filler in
        // the training data; commit those masks as fills so the block can
        // close while positions before the eos keep decoding.
        let eos = state
            .cfg
            .eos_id
            .expect("eos_committed set with eos detection disabled");
        let first_eos = (0..state.current_block.len())
            .find(|&j| state.committed[j] && state.current_block[j] == eos)
            .expect("eos_committed set without a committed eos in the block");
        for &(j, _, _) in &cand {
            if state.committed[j] || j <= first_eos {
                continue;
            }
            state.current_block[j] = eos;
            state.committed[j] = true;
            state.decoded_step[base + j] = Some(step);
            state.confidences[base + j] = Some(0.0);
            state.filled[base + j] = true;
        }
    }
    Ok(())
}

/// Re-encodes the fully committed current block as clean context, extending
/// the cache, and readies the next block (or finishes the run). Counted in
/// `refresh_forwards`, not in NFE.
pub fn finalize_block<F: Scalar>(
    params: &ModelParams<F>,
    state: &mut DecodeState<F>,
) -> Result<()> {
    if state.finished {
        return Err(Error::Decode("generation already finished".into()));
    }
    if !state.block_complete() {
        return Err(Error::Decode(
            "current block still has uncommitted positions".into(),
        ));
    }
    let x = forward_over_cache(
        params,
        &mut state.cache,
        &state.current_block,
        state.block_start,
        true,
    )?;
    state.refresh_forwards += 1;
    if params.config.token_shift {
        state.shift_stash = Some(project_row(params, x.row(x.shape().0 - 1))?);
    }

    state.generated.extend_from_slice(&state.current_block);
    state.block_start += state.cfg.eval_block_size;
    state.current_block.clear();
    state.committed.clear();
    if state.eos_committed || state.generated.len() >= state.rounded_max {
        state.finished = true;
    } else {
        state.push_block_slots();
    }
    Ok(())
}

/// Full generation loop: denoise and finalize block by block until an eos
/// commits or the budget is spent.
pub fn generate<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[TokenId],
    cfg: DecodeConfig,
) -> Result<DecodeOutcome> {
    let mut state = start(params, prompt, cfg)?;
    while !state.finished {
        denoise_step(params, &mut state)?;
        if state.block_complete() {
            finalize_block(params, &mut state)?;
        }
    }
    Ok(DecodeOutcome {
        tokens: state.output_tokens(),
        trace: state.trace(),
    })
}

/// Mean commit step per in-block position, over all blocks of all traces.
///
/// Steps are re-based within each block (the block's first forward is
/// step 1), so the result is the average number of denoising steps a
/// relative position waits before committing — length `eval_block_size`.
/// Eos-filled positions are excluded — their commit step reflects when the
/// eos landed, not a decoding choice about that position — so a relative
/// position that is only ever eos-filled comes back as NaN.
pub fn trace_position_steps(traces: &[DecodeTrace]) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Decode("no traces given".into()))?;
    let l = first.eval_block_size;
    if let Some(t) = traces.iter().find(|t| t.eval_block_size != l) {
        return Err(Error::Decode(format!(
            "mixed eval block sizes {l} and {} in trace set",
            t.eval_block_size
        )));
    }
    let mut sums = vec![0.0f64; l];
    let mut counts = vec![0usize; l];
    for trace in traces {
        let blocks = trace.positions.len().div_ceil(l);
        for b in 0..blocks {
            let block: Vec<&PositionTrace> = trace
                .positions
                .iter()
                .filter(|p| p.position / l == b && !p.filled)
                .collect();
            let Some(base) = block.iter().map(|p| p.step).min() else {
                continue;
            };
            for p in block {
                let rel = p.position % l;
                sums[rel] += (p.step - base + 1) as f64;
                counts[rel] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}
