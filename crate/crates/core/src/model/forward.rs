//! Forward pass and hand-written reverse-mode gradients.
//!
//! The computation per layer is pre-norm attention plus a pre-norm SiLU
//! FFN, both with residual connections:
//!
//! ```text
//! a = rmsnorm(h) * g_attn                      q,k,v = a Wq^T, a Wk^T, a Wv^T
//! attn = softmax(rope(q) rope(k)^T / sqrt(dh)) restricted to layout.allowed
//! h    = h + (attn v) Wo^T
//! f = rmsnorm(h) * g_ffn                       h = h + silu(f W_up^T) W_down^T
//! ```
//!
//! Rotary phases come from `layout.pos_index`, so rows at the same sequence
//! position (noisy/clean copies, cached entries) share positions. The
//! backward pass mirrors this computation exactly; its correctness oracle is
//! central finite differences in `f64` (see the acceptance suite).

use super::{dot, Mat, ModelParams, Scalar};
use crate::attention::AttentionLayout;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Rotary base frequency (standard choice).
const ROPE_BASE: f64 = 10000.0;
/// RMSNorm stabilizer.
const NORM_EPS: f64 = 1e-6;

/// Logits for the layout's `loss_rows`, in `loss_rows` order.
#[derive(Debug, Clone)]
pub struct Logits<F> {
    pub rows: Vec<usize>,
    /// `rows.len() x vocab`.
    pub values: Mat<F>,
}

impl<F: Scalar> Logits<F> {
    /// The logit row for a given layout row, if it was scored.
    pub fn at_row(&self, row: usize) -> Option<&[F]> {
        let i = self.rows.iter().position(|&r| r == row)?;
        Some(self.values.row(i))
    }
}

/// One scored position: read the prediction at `row`, compare against
/// `target`, scale the NLL by `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossItem {
    pub row: usize,
    pub target: TokenId,
    pub weight: f64,
}

/// Per-layer activations kept for the backward pass.
struct LayerTrace<F> {
    h_in: Mat<F>,
    inv_attn: Vec<f64>,
    a_n: Mat<F>,
    q_rot: Mat<F>,
    k_rot: Mat<F>,
    v: Mat<F>,
    /// Attention probabilities, one `rows x rows` matrix per head (zero at
    /// disallowed pairs).
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
    h_mid: Mat<F>,
    inv_ffn: Vec<f64>,
    f_n: Mat<F>,
    u: Mat<F>,
}

struct RunOutput<F> {
    /// Final hidden states after the last norm, all rows.
    x_final: Mat<F>,
    h_final: Mat<F>,
    inv_final: Vec<f64>,
    layers: Vec<LayerTrace<F>>,
}

/// `y[r] = x[r] W^T` for `W: (out x in)`.
pub(crate) fn linear<F: Scalar>(x: &Mat<F>, w: &Mat<F>) -> Mat<F> {
    debug_assert_eq!(x.cols, w.cols);
    Mat::from_fn(x.rows, w.rows, |r, o| dot(w.row(o), x.row(r)))
}

/// Input gradient of `linear`: `dx[r] = sum_o dy[r][o] * w[o]`.
fn linear_back_input<F: Scalar>(dy: &Mat<F>, w: &Mat<F>) -> Mat<F> {
    let mut dx = Mat::zeros(dy.rows, w.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let out = dx.row_mut(r);
        for o in 0..w.rows {
            super::axpy(out, dyr[o], w.row(o));
        }
    }
    dx
}

/// Weight gradient of `linear`, accumulated: `dw[o] += sum_r dy[r][o] x[r]`.
fn linear_back_weight<F: Scalar>(dy: &Mat<F>, x: &Mat<F>, dw: &mut Mat<F>) {
    debug_assert_eq!(dw.rows, dy.cols);
    debug_assert_eq!(dw.cols, x.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xr = x.row(r);
        for o in 0..dw.rows {
            super::axpy(dw.row_mut(o), dyr[o], xr);
        }
    }
}

/// RMSNorm forward over one row: returns `1 / rms` (computed in f64).
pub(crate) fn rms_inv<F: Scalar>(h: &[F]) -> f64 {
    let ms: f64 = h.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() / h.len() as f64;
    1.0 / (ms + NORM_EPS).sqrt()
}

/// `out[c] = h[c] * inv * gain[c]`.
pub(crate) fn rmsnorm_apply<F: Scalar>(h: &[F], inv: f64, gain: &[F], out: &mut [F]) {
    let inv = F::from_f64(inv);
    for c in 0..h.len() {
        out[c] = h[c] * inv * gain[c];
    }
}

/// Backward through `y = (h * inv) .* gain` for one row. Adds the gain
/// gradient into `d_gain` and the input gradient into `d_h`.
fn rmsnorm_backward<F: Scalar>(
    h: &[F],
    inv: f64,
    gain: &[F],
    d_y: &[F],
    d_gain: &mut [F],
    d_h: &mut [F],
) {
    let n = h.len();
    let invf = F::from_f64(inv);
    // d_gain[c] += d_y[c] * h[c] * inv; d_xn[c] = d_y[c] * gain[c].
    let mut dxn_dot_h = F::zero();
    for c in 0..n {
        d_gain[c] += d_y[c] * h[c] * invf;
        dxn_dot_h += d_y[c] * gain[c] * h[c];
    }
    // d_h = inv * d_xn - inv^3/n * (d_xn . h) * h
    let coef = F::from_f64(inv * inv * inv / n as f64) * dxn_dot_h;
    for c in 0..n {
        d_h[c] += invf * (d_y[c] * gain[c]) - coef * h[c];
    }
}

/// Rotates query/key pairs in place by the position's phase. `dir = -1.0`
/// applies the inverse rotation (the transpose), which is also the backward
/// map for gradients.
pub(crate) fn rope_rotate<F: Scalar>(row: &mut [F], pos: usize, n_heads: usize, dir: f64) {
    let dh = row.len() / n_heads;
    for h in 0..n_heads {
        let slice = &mut row[h * dh..(h + 1) * dh];
        for p in 0..dh / 2 {
            let freq = ROPE_BASE.powf(-(2.0 * p as f64) / dh as f64);
            let theta = pos as f64 * freq * dir;
            let (sin, cos) = (F::from_f64(theta.sin()), F::from_f64(theta.cos()));
            let (a, b) = (slice[2 * p], slice[2 * p + 1]);
            slice[2 * p] = a * cos - b * sin;
            slice[2 * p + 1] = a * sin + b * cos;
        }
    }
}

pub(crate) fn silu<F: Scalar>(u: F) -> F {
    u / (F::one() + (-u).exp())
}

/// d silu / d u = sigma(u) * (1 + u * (1 - sigma(u))).
fn silu_grad<F: Scalar>(u: F) -> F {
    let sig = F::one() / (F::one() + (-u).exp());
    sig * (F::one() + u * (F::one() - sig))
}

fn allowed_keys(layout: &AttentionLayout) -> Vec<Vec<usize>> {
    (0..layout.rows())
        .map(|q| (0..layout.rows()).filter(|&k| layout.allowed(q, k)).collect())
        .collect()
}

fn check_inputs<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    layout: &AttentionLayout,
) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() != layout.rows() {
        return Err(Error::Model(format!(
            "{} tokens for a {}-row layout",
            tokens.len(),
            layout.rows()
        )));
    }
    if layout.rows() > cfg.max_positions {
        return Err(Error::Model(format!(
            "layout rows {} exceed max_positions {}",
            layout.rows(),
            cfg.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Model(format!(
            "token {t} out of vocabulary {}",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Runs the network over all rows; optionally keeps per-layer activations.
fn run<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    layout: &AttentionLayout,
    keep_trace: bool,
) -> Result<RunOutput<F>> {
    check_inputs(params, tokens, layout)?;
    let cfg = &params.config;
    let (rows, d, n_heads) = (layout.rows(), cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let keys = allowed_keys(layout);
    if let Some(q) = keys.iter().position(|k| k.is_empty()) {
        return Err(Error::Layout(format!(
            "row {q} has no allowed keys; cannot attend"
        )));
    }

    let mut h = Mat::from_fn(rows, d, |r, c| params.embed.row(tokens[r] as usize)[c]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        // Attention sublayer.
        let h_in = h;
        let inv_attn: Vec<f64> = (0..rows).map(|r| rms_inv(h_in.row(r))).collect();
        let mut a_n = Mat::zeros(rows, d);
        for r in 0..rows {
            rmsnorm_apply(h_in.row(r), inv_attn[r], layer.attn_norm.row(0), a_n.row_mut(r));
        }
        let mut q_rot = linear(&a_n, &layer.wq);
        let mut k_rot = linear(&a_n, &layer.wk);
        let v = linear(&a_n, &layer.wv);
        for r in 0..rows {
            let pos = layout.pos_index[r];
            rope_rotate(q_rot.row_mut(r), pos, n_heads, 1.0);
            rope_rotate(k_rot.row_mut(r), pos, n_heads, 1.0);
        }
        let mut probs: Vec<Mat<F>> = (0..n_heads).map(|_| Mat::zeros(rows, rows)).collect();
        let mut ctx = Mat::zeros(rows, d);
        for head in 0..n_heads {
            let span = head * dh..(head + 1) * dh;
            for q in 0..rows {
                let qv = &q_rot.row(q)[span.clone()];
                // Scores over the allowed keys, max-subtracted softmax.
                let mut scores: Vec<F> = keys[q]
                    .iter()
                    .map(|&k| dot(qv, &k_rot.row(k)[span.clone()]) * scale)
                    .collect();
                let max = scores
                    .iter()
                    .copied()
                    .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
                let mut sum = F::zero();
                for s in &mut scores {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let p_row = probs[head].row_mut(q);
                let ctx_row = &mut ctx.row_mut(q)[span.clone()];
                for (i, &k) in keys[q].iter().enumerate() {
                    let p = scores[i] / sum;
                    p_row[k] = p;
                    super::axpy(ctx_row, p, &v.row(k)[span.clone()]);
                }
            }
        }
        let attn_out = linear(&ctx, &layer.wo);
        let mut h_mid = h_in.clone();
        for i in 0..h_mid.data.len() {
            h_mid.data[i] += attn_out.data[i];
        }

        // FFN sublayer.
        let inv_ffn: Vec<f64> = (0..rows).map(|r| rms_inv(h_mid.row(r))).collect();
        let mut f_n = Mat::zeros(rows, d);
        for r in 0..rows {
            rmsnorm_apply(h_mid.row(r), inv_ffn[r], layer.ffn_norm.row(0), f_n.row_mut(r));
        }
        let u = linear(&f_n, &layer.w_up);
        let s = Mat::from_fn(rows, cfg.d_ffn, |r, c| silu(u.row(r)[c]));
        let ffn_out = linear(&s, &layer.w_down);
        let mut h_out = h_mid.clone();
        for i in 0..h_out.data.len() {
            h_out.data[i] += ffn_out.data[i];
        }
        if !h_out.all_finite() {
            return Err(Error::NonFinite {
                site: format!("layers.{li}"),
            });
        }
        h = h_out;
        if keep_trace {
            layers.push(LayerTrace {
                h_in,
                inv_attn,
                a_n,
                q_rot,
                k_rot,
                v,
                probs,
                ctx,
                h_mid,
                inv_ffn,
                f_n,
                u,
            });
        }
    }

    let h_final = h;
    let inv_final: Vec<f64> = (0..rows).map(|r| rms_inv(h_final.row(r))).collect();
    let mut x_final = Mat::zeros(rows, d);
    for r in 0..rows {
        rmsnorm_apply(
            h_final.row(r),
            inv_final[r],
            params.final_norm.row(0),
            x_final.row_mut(r),
        );
    }
    Ok(RunOutput {
        x_final,
        h_final,
        inv_final,
        layers,
    })
}

fn project_logits<F: Scalar>(
    params: &ModelParams<F>,
    x_final: &Mat<F>,
    rows: &[usize],
) -> Result<Logits<F>> {
    let values = Mat::from_fn(rows.len(), params.config.vocab, |i, v| {
        dot(params.head.row(v), x_final.row(rows[i]))
    });
    if !values.all_finite() {
        return Err(Error::NonFinite {
            site: "head".into(),
        });
    }
    Ok(Logits {
        rows: rows.to_vec(),
        values,
    })
}

/// Full forward pass; logits are produced only at `layout.loss_rows`.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    layout: &AttentionLayout,
) -> Result<Logits<F>> {
    let out = run(params, tokens, layout, false)?;
    project_logits(params, &out.x_final, &layout.loss_rows)
}

/// NLL of `target` under `logits_row`, with the log-sum-exp in f64.
pub(crate) fn nll_f64<F: Scalar>(logits_row: &[F], target: TokenId) -> f64 {
    let max = logits_row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits_row
        .iter()
        .map(|x| (x.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - logits_row[target as usize].as_f64()
}

/// Weighted mean NLL over the items: `sum(w_i nll_i) / len(items)`.
pub(crate) fn items_loss<F: Scalar>(logits: &Logits<F>, items: &[LossItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Model("loss over an empty item set".into()));
    }
    let mut total = 0.0;
    for item in items {
        let row = logits.at_row(item.row).ok_or_else(|| {
            Error::Model(format!("loss item at unscored row {}", item.row))
        })?;
        total += item.weight * nll_f64(row, item.target);
    }
    Ok(total / items.len() as f64)
}

/// Forward + weighted mean NLL over the items, without gradients.
pub fn sequence_loss<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    layout: &AttentionLayout,
    items: &[LossItem],
) -> Result<f64> {
    let logits = forward(params, tokens, layout)?;
    items_loss(&logits, items)
}

/// Forward + loss + gradient accumulation.
///
/// Adds `grad_scale * d(loss)/d(params)` into `grads` (shape-parallel to
/// `params`) and returns the unscaled loss. Callers accumulate over a batch
/// with `grad_scale = 1/batch_size`.
pub fn sequence_loss_grad<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    layout: &AttentionLayout,
    items: &[LossItem],
    grads: &mut ModelParams<F>,
    grad_scale: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Model("loss over an empty item set".into()));
    }
    let out = run(params, tokens, layout, true)?;
    let cfg = &params.config;
    let (rows, d, n_heads) = (layout.rows(), cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let keys = allowed_keys(layout);

    // Loss and d(loss)/d(x_final), fusing the softmax-cross-entropy
    // gradient. Per item the logit gradient is coeff * (softmax - onehot)
    // with coeff = weight / n_items * grad_scale; it is pushed through the
    // head immediately so full (rows x vocab) gradients never materialize.
    let mut loss = 0.0;
    let mut d_x = Mat::zeros(rows, d);
    let inv_n = 1.0 / items.len() as f64;
    for item in items {
        if !layout.loss_rows.contains(&item.row) {
            return Err(Error::Model(format!(
                "loss item at unscored row {}",
                item.row
            )));
        }
        let xr = out.x_final.row(item.row);
        let logits: Vec<f64> = (0..cfg.vocab)
            .map(|v| dot(params.head.row(v), xr).as_f64())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite {
                site: "head".into(),
            });
        }
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        loss += item.weight * (sum.ln() + max - logits[item.target as usize]);
        let coeff = item.weight * inv_n * grad_scale;
        let dxr = d_x.row_mut(item.row);
        for v in 0..cfg.vocab {
            let p = (logits[v] - max).exp() / sum;
            let dz = F::from_f64(coeff * (p - if v == item.target as usize { 1.0 } else { 0.0 }));
            // d_head[v] += dz * x_final[row]; d_x[row] += dz * head[v].
            super::axpy(grads.head.row_mut(v), dz, xr);
            super::axpy(dxr, dz, params.head.row(v));
        }
    }
    loss *= inv_n;

    // Final norm.
    let mut d_h = Mat::zeros(rows, d);
    for r in 0..rows {
        rmsnorm_backward(
            out.h_final.row(r),
            out.inv_final[r],
            params.final_norm.row(0),
            d_x.row(r),
            grads.final_norm.row_mut(0),
            d_h.row_mut(r),
        );
    }

    // Layers in reverse.
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let tr = &out.layers[li];
        let g = &mut grads.layers[li];

        // FFN sublayer: h_out = h_mid + silu(f_n W_up^T) W_down^T.
        let s = Mat::from_fn(rows, cfg.d_ffn, |r, c| silu(tr.u.row(r)[c]));
        let mut d_u = linear_back_input(&d_h, &layer.w_down); // d_s so far
        linear_back_weight(&d_h, &s, &mut g.w_down);
        for i in 0..d_u.data.len() {
            d_u.data[i] *= silu_grad(tr.u.data[i]);
        }
        let d_fn = linear_back_input(&d_u, &layer.w_up);
        linear_back_weight(&d_u, &tr.f_n, &mut g.w_up);
        // d_h currently holds d(h_out) = d(h_mid) via the residual; add the
        // norm path into it.
        for r in 0..rows {
            rmsnorm_backward(
                tr.h_mid.row(r),
                tr.inv_ffn[r],
                layer.ffn_norm.row(0),
                d_fn.row(r),
                g.ffn_norm.row_mut(0),
                d_h.row_mut(r),
            );
        }

        // Attention sublayer: h_mid = h_in + (probs v) Wo^T.
        let d_ctx = linear_back_input(&d_h, &layer.wo);
        linear_back_weight(&d_h, &tr.ctx, &mut g.wo);
        let mut d_qrot = Mat::zeros(rows, d);
        let mut d_krot = Mat::zeros(rows, d);
        let mut d_v = Mat::zeros(rows, d);
        for head in 0..n_heads {
            let span = head * dh..(head + 1) * dh;
            let p = &tr.probs[head];
            for q in 0..rows {
                let d_ctx_q = &d_ctx.row(q)[span.clone()];
                // d_p and the softmax's dot-correction term.
                let d_p: Vec<F> = keys[q]
                    .iter()
                    .map(|&k| dot(d_ctx_q, &tr.v.row(k)[span.clone()]))
                    .collect();
                let correction: F = keys[q]
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| p.row(q)[k] * d_p[i])
                    .sum();
                let qv: Vec<F> = tr.q_rot.row(q)[span.clone()].to_vec();
                let mut d_q_acc = vec![F::zero(); dh];
                for (i, &k) in keys[q].iter().enumerate() {
                    let pk = p.row(q)[k];
                    super::axpy(&mut d_v.row_mut(k)[span.clone()], pk, d_ctx_q);
                    let dz = pk * (d_p[i] - correction) * scale;
                    super::axpy(&mut d_q_acc, dz, &tr.k_rot.row(k)[span.clone()]);
                    super::axpy(&mut d_krot.row_mut(k)[span.clone()], dz, &qv);
                }
                for (c, val) in d_q_acc.into_iter().enumerate() {
                    d_qrot.row_mut(q)[head * dh + c] += val;
                }
            }
        }
        // Unrotate gradients (inverse rotation = transpose).
        for r in 0..rows {
            let pos = layout.pos_index[r];
            rope_rotate(d_qrot.row_mut(r), pos, n_heads, -1.0);
            rope_rotate(d_krot.row_mut(r), pos, n_heads, -1.0);
        }
        let mut d_an = linear_back_input(&d_qrot, &layer.wq);
        linear_back_weight(&d_qrot, &tr.a_n, &mut g.wq);
        let d_an_k = linear_back_input(&d_krot, &layer.wk);
        linear_back_weight(&d_krot, &tr.a_n, &mut g.wk);
        let d_an_v = linear_back_input(&d_v, &layer.wv);
        linear_back_weight(&d_v, &tr.a_n, &mut g.wv);
        for i in 0..d_an.data.len() {
            d_an.data[i] += d_an_k.data[i] + d_an_v.data[i];
        }
        // Residual: d_h stays (h_in path) and gains the norm path.
        for r in 0..rows {
            rmsnorm_backward(
                tr.h_in.row(r),
                tr.inv_attn[r],
                layer.attn_norm.row(0),
                d_an.row(r),
                g.attn_norm.row_mut(0),
                d_h.row_mut(r),
            );
        }
    }

    // Embedding rows.
    for r in 0..rows {
        let row = tokens[r] as usize;
        super::axpy(grads.embed.row_mut(row), F::one(), d_h.row(r));
    }
    Ok(loss)
}

/// Mean of the final hidden states under full bidirectional attention,
/// L2-normalized (an embedding for similarity probes).
pub fn mean_pool_embed<F: Scalar>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Model("cannot embed an empty sequence".into()));
    }
    let layout = crate::attention::bidirectional_layout(tokens.len())?;
    let out = run(params, tokens, &layout, false)?;
    let d = params.config.d_model;
    let mut mean = vec![0.0f64; d];
    for r in 0..tokens.len() {
        for c in 0..d {
            mean[c] += out.x_final.row(r)[c].as_f64();
        }
    }
    for m in &mut mean {
        *m /= tokens.len() as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for m in &mut mean {
            *m /= norm;
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{bidirectional_layout, causal_layout, AttentionLayout};
    use crate::model::{ModelConfig, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab: 13,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 24,
            max_positions: 64,
            token_shift: false,
        }
    }

    fn tiny_params(seed: u64) -> ModelParams<f64> {
        ModelParams::init(&tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let params = ModelParams::<f64>::zeros(&tiny_config()).unwrap();
        let layout = causal_layout(5).unwrap();
        let logits = forward(&params, &[1, 2, 3, 4, 5], &layout).unwrap();
        assert!(logits.values.data.iter().all(|&x| x == 0.0));
        let nll = nll_f64(logits.values.row(0), 7);
        let expect = (tiny_config().vocab as f64).ln();
        assert!((nll - expect).abs() < 1e-12, "nll {nll} vs ln(vocab) {expect}");
    }

    #[test]
    fn disallowed_key_cannot_influence_logits() {
        let params = tiny_params(3);
        let layout = causal_layout(6).unwrap().with_loss_rows(vec![0, 2]).unwrap();
        let base = forward(&params, &[1, 2, 3, 4, 5, 6], &layout).unwrap();
        // Rows 0 and 2 never see keys 3..6; changing those tokens is
        // invisible, bit for bit.
        let changed = forward(&params, &[1, 2, 3, 9, 10, 11], &layout).unwrap();
        assert_eq!(base.values.data, changed.values.data);
        // An allowed key does change them.
        let visible = forward(&params, &[1, 7, 3, 4, 5, 6], &layout).unwrap();
        assert_ne!(base.values.row(1), visible.values.row(1));
    }

    #[test]
    fn permuting_rows_with_layout_permutes_logits() {
        let params = tiny_params(4);
        let l = 6;
        let tokens: Vec<u32> = vec![3, 1, 4, 1, 5, 9];
        let layout = causal_layout(l).unwrap();
        let base = forward(&params, &tokens, &layout).unwrap();

        // Reverse the row order, carrying the relation, positions, roles,
        // and scored rows along.
        let perm: Vec<usize> = (0..l).rev().collect();
        let permuted = AttentionLayout::from_relation(
            l,
            perm.iter().map(|&r| layout.pos_index[r]).collect(),
            perm.iter().map(|&r| layout.row_role[r]).collect(),
            (0..l).collect(),
            |q, k| layout.allowed(perm[q], perm[k]),
        );
        let ptokens: Vec<u32> = perm.iter().map(|&r| tokens[r]).collect();
        let out = forward(&params, &ptokens, &permuted).unwrap();
        for q in 0..l {
            let a = base.at_row(perm[q]).unwrap();
            let b = out.at_row(q).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rope_inverse_restores_vector() {
        let mut row = vec![0.3f64, -1.2, 0.7, 2.5, -0.1, 0.9, 1.1, -0.4];
        let orig = row.clone();
        rope_rotate(&mut row, 17, 2, 1.0);
        assert!(row.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_rotate(&mut row, 17, 2, -1.0);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_basics() {
        let params = tiny_params(5);
        let e = mean_pool_embed(&params, &[4]).unwrap();
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-12);
        // Self-similarity is exactly 1 for identical input.
        let e2 = mean_pool_embed(&params, &[4]).unwrap();
        let cos: f64 = e.iter().zip(&e2).map(|(a, b)| a * b).sum();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(mean_pool_embed(&params, &[]).is_err());
    }

    #[test]
    fn mean_pool_token_permutation_with_fixed_positions() {
        // Bidirectional attention plus mean pooling: if each token keeps its
        // positional index, reordering the rows cannot change the pooled
        // embedding (beyond summation-order noise).
        let params = tiny_params(6);
        let tokens: Vec<u32> = vec![2, 7, 1, 8];
        let l = tokens.len();
        let base = mean_pool_embed(&params, &tokens).unwrap();

        let perm = [2usize, 0, 3, 1];
        let layout = AttentionLayout::from_relation(
            l,
            perm.to_vec(), // positions travel with the tokens
            vec![crate::attention::RowRole::Plain; l],
            (0..l).collect(),
            |_, _| true,
        );
        let ptokens: Vec<u32> = perm.iter().map(|&r| tokens[r]).collect();
        let out = run(&params, &ptokens, &layout, false).unwrap();
        let d = params.config.d_model;
        let mut mean = vec![0.0f64; d];
        for r in 0..l {
            for c in 0..d {
                mean[c] += out.x_final.row(r)[c].as_f64();
            }
        }
        for m in &mut mean {
            *m /= l as f64;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in base.iter().zip(&mean) {
            assert!((a - b / norm).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences_smoke() {
        // Spot-check of the hand-written backward pass (the acceptance
        // suite sweeps every coordinate and configuration). Three
        // coordinates per tensor, causal layout, f64 central differences.
        let mut params = tiny_params(11);
        let tokens: Vec<u32> = vec![5, 2, 9, 4, 0, 7];
        let layout = causal_layout(6).unwrap().with_loss_rows(vec![1, 3, 4]).unwrap();
        let items = vec![
            LossItem { row: 1, target: 9, weight: 2.0 },
            LossItem { row: 3, target: 0, weight: 1.0 },
            LossItem { row: 4, target: 7, weight: 0.5 },
        ];
        let mut grads = ModelParams::zeros(&tiny_config()).unwrap();
        let base = sequence_loss_grad(&params, &tokens, &layout, &items, &mut grads, 1.0).unwrap();
        assert!(base > 0.0);

        let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            for pick in 0..3 {
                let (idx, analytic) = {
                    let (_, g) = grads.tensors().into_iter().find(|(n, _)| *n == name).unwrap();
                    let idx = (g.data.len() - 1) * pick / 2;
                    (idx, g.data[idx])
                };
                let eps = 1e-5;
                let numeric = {
                    let tweak = |params: &mut ModelParams<f64>, delta: f64| {
                        let (_, t) = params
                            .tensors_mut()
                            .into_iter()
                            .find(|(n, _)| *n == name)
                            .unwrap();
                        t.data[idx] += delta;
                    };
                    tweak(&mut params, eps);
                    let up = sequence_loss(&params, &tokens, &layout, &items).unwrap();
                    tweak(&mut params, -2.0 * eps);
                    let down = sequence_loss(&params, &tokens, &layout, &items).unwrap();
                    tweak(&mut params, eps);
                    (up - down) / (2.0 * eps)
                };
                // Finite differences bottom out at ~1e-11 absolute noise;
                // below that only the relative tolerance is meaningful.
                let diff = (analytic - numeric).abs();
                let rel = diff / analytic.abs().max(numeric.abs()).max(1e-12);
                assert!(
                    diff < 1e-10 || rel < 1e-4,
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = tiny_params(7);
        let layout = causal_layout(4).unwrap();
        assert!(forward(&params, &[1, 2, 3], &layout).is_err()); // length
        assert!(forward(&params, &[1, 2, 3, 200], &layout).is_err()); // vocab
        let big = bidirectional_layout(65).unwrap(); // > max_positions
        assert!(forward(&params, &vec![1; 65], &big).is_err());
    }

    #[test]
    fn loss_items_validate() {
        let params = tiny_params(8);
        let layout = causal_layout(4).unwrap().with_loss_rows(vec![1]).unwrap();
        let logits = forward(&params, &[1, 2, 3, 4], &layout).unwrap();
        assert!(items_loss(&logits, &[]).is_err());
        let bad = LossItem {
            row: 2,
            target: 3,
            weight: 1.0,
        };
        assert!(items_loss(&logits, &[bad]).is_err());
        let ok = LossItem {
            row: 1,
            target: 3,
            weight: 1.0,
        };
        assert!(items_loss(&logits, &[ok]).unwrap() > 0.0);
    }
}
