//! Explicit attention layouts.
//!
//! A layout materializes the full query/key visibility relation for a
//! (small) row count, plus the positional index and stream role of every
//! row. Five patterns cover training and decoding:
//!
//! * `causal` — ordinary next-token attention, `k <= q`.
//! * `bidirectional` — everything sees everything.
//! * `block_noisy` — one corrupted stream, block-causal: a query sees every
//!   key whose block is at or before its own.
//! * `block_clean` — two stacked streams of length `L` each: corrupted
//!   ("noisy") rows attend their own block in the noisy stream and strictly
//!   earlier blocks in the clean stream; clean rows attend the clean stream
//!   block-causally and never the noisy stream. Noisy and clean copies of a
//!   sequence position share a positional index.
//! * `decode` — `L'` in-flight rows over a `cached_len`-entry KV cache:
//!   in-flight rows see the whole cache and each other.
//!
//! With `L'` dividing into single-token blocks, `block_noisy` degenerates
//! to `causal`; with one whole-sequence block it degenerates to
//! `bidirectional`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Which stream a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowRole {
    /// Single-stream row (causal / bidirectional layouts).
    Plain,
    /// Corrupted-stream row.
    Noisy,
    /// Clean-context row (conditioning only; never scored).
    Clean,
}

/// Attention pattern selector for training losses and configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Causal,
    Bidirectional,
    BlockNoisy,
    BlockClean,
}

impl LayoutKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayoutKind::Causal => "causal",
            LayoutKind::Bidirectional => "bidirectional",
            LayoutKind::BlockNoisy => "block_noisy",
            LayoutKind::BlockClean => "block_clean",
        }
    }

    pub fn parse(s: &str) -> Option<LayoutKind> {
        [
            LayoutKind::Causal,
            LayoutKind::Bidirectional,
            LayoutKind::BlockNoisy,
            LayoutKind::BlockClean,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// How clean-context rows in `block_clean` attend among themselves.
/// Block-causal (a clean row sees its whole block plus earlier blocks) is
/// the default; token-causal is kept for comparison because cached decode
/// could be built either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanContext {
    BlockCausal,
    TokenCausal,
}

/// A fully materialized attention layout over `rows` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    rows: usize,
    /// Row-major visibility: `allowed[q * rows + k]`.
    allowed: Vec<bool>,
    /// Positional index fed to the rotary encoding, per row.
    pub pos_index: Vec<usize>,
    pub row_role: Vec<RowRole>,
    /// Rows where logits are computed and loss may be read. Sorted.
    pub loss_rows: Vec<usize>,
}

impl AttentionLayout {
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.rows + k]
    }

    /// Replaces the scored-row set (e.g. with the masked positions of a
    /// particular corruption). Rows must be in range, sorted, distinct, and
    /// never clean-context rows.
    pub fn with_loss_rows(mut self, rows: Vec<usize>) -> Result<Self> {
        for w in rows.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Layout("loss_rows must be sorted and distinct".into()));
            }
        }
        for &r in &rows {
            if r >= self.rows {
                return Err(Error::Layout(format!("loss row {r} out of {} rows", self.rows)));
            }
            if self.row_role[r] == RowRole::Clean {
                return Err(Error::Layout(format!("loss row {r} is a clean-context row")));
            }
        }
        self.loss_rows = rows;
        Ok(self)
    }

    /// Materializes an arbitrary visibility relation. The named
    /// constructors below cover the standard patterns; this stays public
    /// for custom reference layouts in tests and experiments.
    pub fn from_relation(
        rows: usize,
        pos_index: Vec<usize>,
        row_role: Vec<RowRole>,
        loss_rows: Vec<usize>,
        rel: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut allowed = vec![false; rows * rows];
        for q in 0..rows {
            for k in 0..rows {
                allowed[q * rows + k] = rel(q, k);
            }
        }
        AttentionLayout {
            rows,
            allowed,
            pos_index,
            row_role,
            loss_rows,
        }
    }

    /// Renders the visibility grid with one character per (query, key)
    /// pair: `#` allowed, `.` blocked. Queries run top to bottom.
    pub fn render_ascii(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.rows + 1));
        for q in 0..self.rows {
            for k in 0..self.rows {
                out.push(if self.allowed(q, k) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    /// Writes the grid as a binary-valued plain PGM image (white = allowed).
    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "P2")?;
        writeln!(w, "{} {}", self.rows, self.rows)?;
        writeln!(w, "1")?;
        for q in 0..self.rows {
            let line: Vec<&str> = (0..self.rows)
                .map(|k| if self.allowed(q, k) { "1" } else { "0" })
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn check_len(l: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::Layout("layout needs at least one row".into()));
    }
    Ok(())
}

fn check_blocks(l: usize, l_prime: usize) -> Result<()> {
    check_len(l)?;
    if l_prime == 0 || l % l_prime != 0 {
        return Err(Error::Layout(format!(
            "length {l} is not a positive multiple of block size {l_prime}"
        )));
    }
    Ok(())
}

/// Next-token attention: query `q` sees keys `k <= q`.
pub fn causal_layout(l: usize) -> Result<AttentionLayout> {
    check_len(l)?;
    Ok(AttentionLayout::from_relation(
        l,
        (0..l).collect(),
        vec![RowRole::Plain; l],
        (0..l).collect(),
        |q, k| k <= q,
    ))
}

/// Full attention: every query sees every key.
pub fn bidirectional_layout(l: usize) -> Result<AttentionLayout> {
    check_len(l)?;
    Ok(AttentionLayout::from_relation(
        l,
        (0..l).collect(),
        vec![RowRole::Plain; l],
        (0..l).collect(),
        |_, _| true,
    ))
}

/// Single corrupted stream with block-causal visibility: query `q` sees key
/// `k` iff `k`'s block is at or before `q`'s block.
pub fn block_noisy_layout(l: usize, l_prime: usize) -> Result<AttentionLayout> {
    check_blocks(l, l_prime)?;
    Ok(AttentionLayout::from_relation(
        l,
        (0..l).collect(),
        vec![RowRole::Noisy; l],
        (0..l).collect(),
        move |q, k| k / l_prime <= q / l_prime,
    ))
}

/// Two stacked streams: rows `0..l` are the corrupted ("noisy") copy and
/// rows `l..2l` the clean copy of the same sequence, sharing positional
/// indices. Noisy rows attend their own block in the noisy stream and
/// strictly earlier blocks in the clean stream; clean rows attend only the
/// clean stream, block-causally by default.
pub fn block_clean_layout(
    l: usize,
    l_prime: usize,
    clean_ctx: CleanContext,
) -> Result<AttentionLayout> {
    check_blocks(l, l_prime)?;
    let rows = 2 * l;
    let pos_index: Vec<usize> = (0..l).chain(0..l).collect();
    let mut row_role = vec![RowRole::Noisy; l];
    row_role.extend(vec![RowRole::Clean; l]);
    Ok(AttentionLayout::from_relation(
        rows,
        pos_index,
        row_role,
        (0..l).collect(),
        move |q, k| {
            let (q_clean, q_pos) = (q >= l, q % l);
            let (k_clean, k_pos) = (k >= l, k % l);
            let (qb, kb) = (q_pos / l_prime, k_pos / l_prime);
            match (q_clean, k_clean) {
                (false, false) => qb == kb,
                (false, true) => kb < qb,
                (true, false) => false,
                (true, true) => match clean_ctx {
                    CleanContext::BlockCausal => kb <= qb,
                    CleanContext::TokenCausal => k_pos <= q_pos,
                },
            }
        },
    ))
}

/// Decode-time layout: `cached_len` cache entries (clean, already encoded,
/// never recomputed — their visibility rows are all-false here) followed by
/// `l_prime` in-flight rows that see the entire cache and each other.
/// In-flight positional indices continue the cache: `cached_len + offset`.
pub fn decode_layout(cached_len: usize, l_prime: usize) -> Result<AttentionLayout> {
    if l_prime == 0 {
        return Err(Error::Layout("decode layout needs a positive block".into()));
    }
    let rows = cached_len + l_prime;
    let pos_index: Vec<usize> = (0..rows).collect();
    let mut row_role = vec![RowRole::Clean; cached_len];
    row_role.extend(vec![RowRole::Noisy; l_prime]);
    Ok(AttentionLayout::from_relation(
        rows,
        pos_index,
        row_role,
        (cached_len..rows).collect(),
        move |q, _k| q >= cached_len,
    ))
}

/// Builds the layout for a training loss kind over a single sequence of
/// length `l` partitioned into `l_prime`-blocks.
pub fn training_layout(kind: LayoutKind, l: usize, l_prime: usize) -> Result<AttentionLayout> {
    match kind {
        LayoutKind::Causal => causal_layout(l),
        LayoutKind::Bidirectional => bidirectional_layout(l),
        LayoutKind::BlockNoisy => block_noisy_layout(l, l_prime),
        LayoutKind::BlockClean => block_clean_layout(l, l_prime, CleanContext::BlockCausal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_counts() {
        let l = causal_layout(4).unwrap();
        let allowed: usize = (0..4)
            .map(|q| (0..4).filter(|&k| l.allowed(q, k)).count())
            .sum();
        assert_eq!(allowed, 10); // 1+2+3+4
        assert!(l.allowed(3, 0) && !l.allowed(0, 3));
    }

    #[test]
    fn block_noisy_first_block() {
        // With l = 4, l' = 2: queries in the first block see exactly the
        // first block's keys.
        let l = block_noisy_layout(4, 2).unwrap();
        for q in 0..2 {
            for k in 0..4 {
                assert_eq!(l.allowed(q, k), k < 2, "q={q} k={k}");
            }
        }
        // Second block sees everything.
        for k in 0..4 {
            assert!(l.allowed(2, k) && l.allowed(3, k));
        }
    }

    /// Same visibility relation, positions, and scored rows; stream-role
    /// tags may differ (block layouts mark rows noisy, plain layouts don't).
    fn same_visibility(a: &AttentionLayout, b: &AttentionLayout) -> bool {
        a.rows() == b.rows()
            && a.pos_index == b.pos_index
            && a.loss_rows == b.loss_rows
            && (0..a.rows()).all(|q| (0..a.rows()).all(|k| a.allowed(q, k) == b.allowed(q, k)))
    }

    #[test]
    fn degenerate_block_sizes() {
        for l in [1usize, 2, 3, 8, 32] {
            assert!(same_visibility(
                &block_noisy_layout(l, 1).unwrap(),
                &causal_layout(l).unwrap()
            ));
            assert!(same_visibility(
                &block_noisy_layout(l, l).unwrap(),
                &bidirectional_layout(l).unwrap()
            ));
        }
    }

    #[test]
    fn block_clean_relation() {
        let l = 8;
        let lp = 2;
        let layout = block_clean_layout(l, lp, CleanContext::BlockCausal).unwrap();
        assert_eq!(layout.rows(), 2 * l);
        for q in 0..2 * l {
            for k in 0..2 * l {
                let (q_clean, q_pos) = (q >= l, q % l);
                let (k_clean, k_pos) = (k >= l, k % l);
                let (qb, kb) = (q_pos / lp, k_pos / lp);
                let expect = match (q_clean, k_clean) {
                    (false, false) => qb == kb,
                    (false, true) => kb < qb,
                    (true, false) => false,
                    (true, true) => kb <= qb,
                };
                assert_eq!(layout.allowed(q, k), expect, "q={q} k={k}");
            }
        }
        // Shared positional indices between the two copies of a position.
        for j in 0..l {
            assert_eq!(layout.pos_index[j], layout.pos_index[l + j]);
        }
        // Clean rows are context only.
        assert!(layout.loss_rows.iter().all(|&r| r < l));
    }

    #[test]
    fn block_clean_token_causal_flag() {
        let layout = block_clean_layout(4, 2, CleanContext::TokenCausal).unwrap();
        // Clean row of position 1 sees clean position 0 and itself, but not
        // clean position 2 even though it shares no block boundary rule.
        assert!(layout.allowed(5, 4));
        assert!(layout.allowed(5, 5));
        assert!(!layout.allowed(5, 6));
        // Noisy-side visibility is unchanged by the flag.
        let block = block_clean_layout(4, 2, CleanContext::BlockCausal).unwrap();
        for q in 0..4 {
            for k in 0..8 {
                assert_eq!(layout.allowed(q, k), block.allowed(q, k));
            }
        }
    }

    #[test]
    fn decode_matches_block_clean_noisy_slice() {
        // The in-flight rows of the decode layout must see exactly what the
        // noisy rows of block b see in block_clean: own block in the noisy
        // stream, earlier blocks in the clean stream.
        let (l, lp) = (12, 4);
        let train = block_clean_layout(l, lp, CleanContext::BlockCausal).unwrap();
        for b in 0..l / lp {
            let cached = b * lp;
            let dec = decode_layout(cached, lp).unwrap();
            for j in 0..lp {
                let dq = cached + j; // in-flight row in decode layout
                let tq = b * lp + j; // noisy row in training layout
                assert_eq!(dec.pos_index[dq], tq);
                // Cache entry c corresponds to clean row l + c.
                for c in 0..cached {
                    assert_eq!(dec.allowed(dq, c), train.allowed(tq, l + c));
                }
                // In-flight key j2 corresponds to noisy row of the block.
                for j2 in 0..lp {
                    assert_eq!(dec.allowed(dq, cached + j2), train.allowed(tq, b * lp + j2));
                }
            }
        }
    }

    #[test]
    fn loss_rows_validation() {
        let layout = block_clean_layout(4, 2, CleanContext::BlockCausal).unwrap();
        assert!(layout.clone().with_loss_rows(vec![1, 3]).is_ok());
        assert!(layout.clone().with_loss_rows(vec![3, 1]).is_err());
        assert!(layout.clone().with_loss_rows(vec![1, 1]).is_err());
        assert!(layout.clone().with_loss_rows(vec![9]).is_err()); // clean row
        assert!(layout.with_loss_rows(vec![64]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(causal_layout(0).is_err());
        assert!(block_noisy_layout(6, 4).is_err());
        assert!(block_clean_layout(6, 4, CleanContext::BlockCausal).is_err());
        assert!(decode_layout(4, 0).is_err());
    }

    #[test]
    fn ascii_grid_golden() {
        let layout = causal_layout(3).unwrap();
        assert_eq!(layout.render_ascii(), "#..\n##.\n###\n");
        let mut pgm = Vec::new();
        layout.write_pgm(&mut pgm).unwrap();
        let text = String::from_utf8(pgm).unwrap();
        assert!(text.starts_with("P2\n3 3\n1\n1 0 0\n"));
    }
}
