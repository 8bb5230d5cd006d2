//! Single-head attention variants and the multi-head wrapper.
//!
//! The bi-level path is deliberately the naive one: build the full exact
//! neighbor logit matrix and the full grouped logit matrix, then merge by
//! replacement — neighbor values where the distance is below the window,
//! grouped values everywhere else — and softmax once. Two matmuls instead
//! of one is the whole cost, and every intermediate stays inspectable.
//!
//! All logit matrices are causal-masked with the in-band sentinel before
//! any merge, so downstream code never needs a separate mask argument.

use crate::positions::{rel_pos_matrix, ExtensionScheme, SelfExtendParams};
use crate::rope::{alibi_logit_bias, apply_rope_rows, RopeCache};
use crate::tensor::{Matrix2D, MASK_SENTINEL};

// ── Inputs and outputs ──────────────────────────────────────────────────────

/// One attention head's inputs: query/key/value rows for positions
/// `0..seq_len`, plus the logit scale.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInput<'a> {
    pub q: &'a Matrix2D,
    pub k: &'a Matrix2D,
    pub v: &'a Matrix2D,
    /// Multiplied into every logit before masking; `1/sqrt(head_dim)`
    /// unless a test overrides it.
    pub scale: f32,
}

impl<'a> AttentionInput<'a> {
    /// Bundles Q/K/V with the standard `1/sqrt(head_dim)` scale. Panics if
    /// shapes disagree.
    #[must_use]
    pub fn new(q: &'a Matrix2D, k: &'a Matrix2D, v: &'a Matrix2D) -> Self {
        assert_eq!(q.rows(), k.rows(), "query and key sequence lengths differ");
        assert_eq!(q.rows(), v.rows(), "query and value sequence lengths differ");
        assert_eq!(q.cols(), k.cols(), "query and key widths differ");
        let scale = 1.0 / (q.cols() as f32).sqrt();
        AttentionInput { q, k, v, scale }
    }

    #[inline]
    #[must_use]
    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }
}

/// Attention result plus the post-softmax weights, kept around because most
/// tests want to look at them.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `seq_len x v_dim` mixed values.
    pub values: Matrix2D,
    /// `seq_len x seq_len` attention weights; masked cells are exactly 0.
    pub weights: Matrix2D,
}

fn finish(input: &AttentionInput, logits: &Matrix2D) -> AttentionOutput {
    let weights = logits.softmax_rows();
    let values = weights.matmul(input.v);
    AttentionOutput { values, weights }
}

/// Overwrites every non-causal cell (`n > m`) with the mask sentinel.
pub(crate) fn causal_mask(logits: &mut Matrix2D) {
    for m in 0..logits.rows() {
        for n in (m + 1)..logits.cols() {
            logits.set(m, n, MASK_SENTINEL);
        }
    }
}

// ── Branch logits ───────────────────────────────────────────────────────────

/// Exact-position logits: queries and keys rotated at their true positions,
/// scaled, causal-masked.
#[must_use]
pub fn neighbor_logits(input: &AttentionInput, cache: &RopeCache) -> Matrix2D {
    let positions: Vec<usize> = (0..input.seq_len()).collect();
    let qr = apply_rope_rows(input.q, &positions, cache);
    let kr = apply_rope_rows(input.k, &positions, cache);
    let mut logits = qr.matmul(&kr.transpose());
    logits.scale(input.scale);
    causal_mask(&mut logits);
    logits
}

/// Grouped-position logits: queries rotated at `pos / G_s + shift`, keys at
/// `pos / G_s`, scaled, causal-masked.
#[must_use]
pub fn grouped_logits(
    input: &AttentionInput,
    params: &SelfExtendParams,
    cache: &RopeCache,
) -> Matrix2D {
    let g = params.group_size;
    let shift = params.shift();
    let q_pos: Vec<usize> = (0..input.seq_len()).map(|p| p / g + shift).collect();
    let k_pos: Vec<usize> = (0..input.seq_len()).map(|p| p / g).collect();
    let qr = apply_rope_rows(input.q, &q_pos, cache);
    let kr = apply_rope_rows(input.k, &k_pos, cache);
    let mut logits = qr.matmul(&kr.transpose());
    logits.scale(input.scale);
    causal_mask(&mut logits);
    logits
}

// ── Merge ───────────────────────────────────────────────────────────────────

/// Which causal cells keep their exact neighbor logit: distances
/// `0..=w_n - 1`. Everything else causal takes the grouped logit.
#[derive(Debug, Clone)]
pub struct MergeMask {
    seq_len: usize,
    neighbor: Vec<bool>,
}

impl MergeMask {
    #[inline]
    #[must_use]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// True when cell `(m, n)` keeps the neighbor branch value.
    #[inline]
    #[must_use]
    pub fn is_neighbor(&self, m: usize, n: usize) -> bool {
        self.neighbor[m * self.seq_len + n]
    }

    /// CSV rendering (1 = neighbor cell, 0 = grouped or masked).
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in 0..self.seq_len {
            let row: Vec<&str> =
                (0..self.seq_len).map(|n| if self.is_neighbor(m, n) { "1" } else { "0" }).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds the neighbor/grouped selection mask for a sequence.
#[must_use]
pub fn merge_mask(seq_len: usize, neighbor_window: usize) -> MergeMask {
    let mut neighbor = vec![false; seq_len * seq_len];
    for m in 0..seq_len {
        for n in 0..=m {
            neighbor[m * seq_len + n] = m - n < neighbor_window;
        }
    }
    MergeMask { seq_len, neighbor }
}

/// Merged pre-softmax logits: neighbor values inside the window, grouped
/// values outside, sentinel on non-causal cells.
#[must_use]
pub fn merged_logits(
    input: &AttentionInput,
    params: &SelfExtendParams,
    cache: &RopeCache,
) -> Matrix2D {
    let ngb = neighbor_logits(input, cache);
    let grp = grouped_logits(input, params, cache);
    let mask = merge_mask(input.seq_len(), params.neighbor_window);
    let mut merged = grp;
    for m in 0..input.seq_len() {
        for n in 0..=m {
            if mask.is_neighbor(m, n) {
                merged.set(m, n, ngb.get(m, n));
            }
        }
    }
    merged
}

/// Bi-level attention: merge the two logit matrices, softmax once, mix
/// values.
///
/// In debug builds this also re-derives the remapped distances and asserts
/// that, whenever the sequence fits the extended range, every distance the
/// softmax actually sees stays below the pretraining window.
#[must_use]
pub fn merge_and_attend(
    input: &AttentionInput,
    params: &SelfExtendParams,
    cache: &RopeCache,
) -> AttentionOutput {
    let logits = merged_logits(input, params, cache);
    #[cfg(debug_assertions)]
    {
        let seq_len = input.seq_len();
        if seq_len <= params.max_extended_length() {
            let rel = rel_pos_matrix(seq_len, &ExtensionScheme::SelfExtend(*params))
                .expect("params validated by callers");
            let max = rel.max_entry().unwrap_or(0) as usize;
            debug_assert!(
                max <= params.pretrain_window - 1,
                "effective distance {max} escaped the pretrained range"
            );
        }
    }
    finish(input, &logits)
}

// ── Named variants ──────────────────────────────────────────────────────────

/// Plain causal attention with rotary positions.
#[must_use]
pub fn vanilla_attention(input: &AttentionInput, cache: &RopeCache) -> AttentionOutput {
    let logits = neighbor_logits(input, cache);
    finish(input, &logits)
}

/// Causal attention restricted to the `window` most recent keys.
#[must_use]
pub fn swa_attention(input: &AttentionInput, cache: &RopeCache, window: usize) -> AttentionOutput {
    assert!(window >= 1, "window must be >= 1");
    let mut logits = neighbor_logits(input, cache);
    for m in 0..input.seq_len() {
        for n in 0..=m {
            if m - n >= window {
                logits.set(m, n, MASK_SENTINEL);
            }
        }
    }
    finish(input, &logits)
}

/// Attention confined to consecutive blocks of `local_window` tokens;
/// positions restart at 0 inside each block, so each block behaves like an
/// independent short sequence.
#[must_use]
pub fn chunked_attention(
    input: &AttentionInput,
    cache: &RopeCache,
    local_window: usize,
) -> AttentionOutput {
    assert!(local_window >= 1, "local_window must be >= 1");
    let seq_len = input.seq_len();
    let positions: Vec<usize> = (0..seq_len).map(|p| p % local_window).collect();
    let qr = apply_rope_rows(input.q, &positions, cache);
    let kr = apply_rope_rows(input.k, &positions, cache);
    let mut logits = qr.matmul(&kr.transpose());
    logits.scale(input.scale);
    for m in 0..seq_len {
        for n in 0..seq_len {
            if n > m || m / local_window != n / local_window {
                logits.set(m, n, MASK_SENTINEL);
            }
        }
    }
    finish(input, &logits)
}

/// Constant-far-position attention: every distance at or beyond
/// `neighbor_window` is presented as exactly `neighbor_window`.
///
/// Implemented by running the bi-level path with a group size of the whole
/// sequence, which collapses all grouped positions to the same value — so
/// this variant is bitwise identical to that limit by construction.
#[must_use]
pub fn rerope_attention(
    input: &AttentionInput,
    cache: &RopeCache,
    neighbor_window: usize,
    pretrain_window: usize,
) -> AttentionOutput {
    let params = SelfExtendParams {
        group_size: input.seq_len().max(1),
        neighbor_window,
        pretrain_window,
    };
    merge_and_attend(input, &params, cache)
}

/// Position-bias attention: no rotation, logits get `-slope * distance`,
/// with distances taken from the scheme's relative-position table (plain
/// distances for the vanilla table, remapped ones for the bi-level table).
#[must_use]
pub fn alibi_attention(
    input: &AttentionInput,
    slope: f32,
    rel: &crate::positions::RelPosMatrix,
) -> AttentionOutput {
    assert_eq!(rel.seq_len(), input.seq_len(), "relative-position table has the wrong size");
    let mut logits = input.q.matmul(&input.k.transpose());
    logits.scale(input.scale);
    for m in 0..input.seq_len() {
        for n in 0..input.seq_len() {
            match rel.get(m, n) {
                Some(dist) => {
                    let biased = logits.get(m, n) + alibi_logit_bias(dist as usize, slope);
                    logits.set(m, n, biased);
                }
                None => logits.set(m, n, MASK_SENTINEL),
            }
        }
    }
    finish(input, &logits)
}

/// Runs one head under any scheme. `head_index` selects the slope for the
/// ALiBi variants and is ignored otherwise.
#[must_use]
pub fn single_head_attention(
    input: &AttentionInput,
    scheme: &ExtensionScheme,
    head_index: usize,
    cache: &RopeCache,
) -> AttentionOutput {
    match scheme {
        ExtensionScheme::Vanilla { .. } => vanilla_attention(input, cache),
        ExtensionScheme::SelfExtend(params) => merge_and_attend(input, params, cache),
        ExtensionScheme::ReRope { neighbor_window, pretrain_window } => {
            rerope_attention(input, cache, *neighbor_window, *pretrain_window)
        }
        ExtensionScheme::SlidingWindow { window } => swa_attention(input, cache, *window),
        ExtensionScheme::Chunked { local_window } => {
            chunked_attention(input, cache, *local_window)
        }
        ExtensionScheme::Alibi { slopes } => {
            let rel = rel_pos_matrix(input.seq_len(), scheme).expect("validated scheme");
            alibi_attention(input, slopes.get(head_index), &rel)
        }
        ExtensionScheme::AlibiSelfExtend { slopes, .. } => {
            let rel = rel_pos_matrix(input.seq_len(), scheme).expect("validated scheme");
            alibi_attention(input, slopes.get(head_index), &rel)
        }
    }
}

// ── Multi-head wrapper ──────────────────────────────────────────────────────

/// Projection weights for one multi-head attention layer. All four are
/// `d_model x d_model`; heads are contiguous column blocks of the Q/K/V
/// projections.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub w_q: Matrix2D,
    pub w_k: Matrix2D,
    pub w_v: Matrix2D,
    pub w_o: Matrix2D,
    pub n_heads: usize,
}

impl MhaWeights {
    /// Head width implied by the projection size and head count.
    #[must_use]
    pub fn head_dim(&self) -> usize {
        self.w_q.cols() / self.n_heads
    }

    fn validate(&self, d_model: usize) {
        assert!(self.n_heads > 0, "n_heads must be >= 1");
        for (name, w) in
            [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
        {
            assert_eq!(
                (w.rows(), w.cols()),
                (d_model, d_model),
                "{name} must be {d_model}x{d_model}"
            );
        }
        assert_eq!(d_model % self.n_heads, 0, "d_model must divide evenly into heads");
    }
}

/// Copies columns `[h*w, (h+1)*w)` into a fresh matrix.
fn head_slice(m: &Matrix2D, h: usize, width: usize) -> Matrix2D {
    Matrix2D::from_fn(m.rows(), width, |i, j| m.get(i, h * width + j))
}

/// Full multi-head attention over an input of shape `seq_len x d_model`:
/// project, run each head under the scheme, concatenate, project back.
#[must_use]
pub fn multi_head_attention(
    x: &Matrix2D,
    weights: &MhaWeights,
    scheme: &ExtensionScheme,
    cache: &RopeCache,
) -> Matrix2D {
    weights.validate(x.cols());
    let (seq_len, d_model) = (x.rows(), x.cols());
    let head_dim = weights.head_dim();
    let q = x.matmul(&weights.w_q);
    let k = x.matmul(&weights.w_k);
    let v = x.matmul(&weights.w_v);
    let mut concat = Matrix2D::zeros(seq_len, d_model);
    for h in 0..weights.n_heads {
        let (qh, kh, vh) =
            (head_slice(&q, h, head_dim), head_slice(&k, h, head_dim), head_slice(&v, h, head_dim));
        let input = AttentionInput::new(&qh, &kh, &vh);
        let out = single_head_attention(&input, scheme, h, cache);
        for i in 0..seq_len {
            for j in 0..head_dim {
                concat.set(i, h * head_dim + j, out.values.get(i, j));
            }
        }
    }
    concat.matmul(&weights.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::rope::rope_dot;
    use crate::tensor::is_masked;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix2D {
        Matrix2D::from_fn(rows, cols, |_, _| rng.normal(0.0, 1.0) as f32)
    }

    fn params(g: usize, w: usize, l: usize) -> SelfExtendParams {
        SelfExtendParams { group_size: g, neighbor_window: w, pretrain_window: l }
    }

    /// Cell-by-cell oracle: one `rope_dot` per cell, no matmul.
    fn per_cell_logits(
        input: &AttentionInput,
        cache: &RopeCache,
        q_pos: impl Fn(usize) -> usize,
        k_pos: impl Fn(usize) -> usize,
    ) -> Matrix2D {
        let s = input.seq_len();
        Matrix2D::from_fn(s, s, |m, n| {
            if n > m {
                MASK_SENTINEL
            } else {
                input.scale * rope_dot(input.q.row(m), q_pos(m), input.k.row(n), k_pos(n), cache)
            }
        })
    }

    #[test]
    fn neighbor_logits_match_per_cell_oracle() {
        let mut rng = Rng::new(21);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let (q, k, v) = (
            random_matrix(&mut rng, 12, 8),
            random_matrix(&mut rng, 12, 8),
            random_matrix(&mut rng, 12, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let got = neighbor_logits(&input, &cache);
        let want = per_cell_logits(&input, &cache, |m| m, |n| n);
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn grouped_logits_match_per_cell_oracle() {
        let mut rng = Rng::new(22);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let p = params(2, 4, 7);
        let (q, k, v) = (
            random_matrix(&mut rng, 10, 8),
            random_matrix(&mut rng, 10, 8),
            random_matrix(&mut rng, 10, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let got = grouped_logits(&input, &p, &cache);
        let shift = p.shift();
        let want = per_cell_logits(&input, &cache, |m| m / 2 + shift, |n| n / 2);
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn merge_takes_each_branch_exactly_where_selected() {
        let mut rng = Rng::new(23);
        let cache = RopeCache::new(8, 64, 10_000.0);
        let p = params(3, 5, 16);
        let s = 20;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let ngb = neighbor_logits(&input, &cache);
        let grp = grouped_logits(&input, &p, &cache);
        let merged = merged_logits(&input, &p, &cache);
        for m in 0..s {
            for n in 0..s {
                if n > m {
                    assert!(is_masked(merged.get(m, n)));
                } else if m - n < p.neighbor_window {
                    assert_eq!(merged.get(m, n).to_bits(), ngb.get(m, n).to_bits());
                } else {
                    assert_eq!(merged.get(m, n).to_bits(), grp.get(m, n).to_bits());
                }
            }
        }
    }

    #[test]
    fn mask_before_or_after_merge_is_equivalent() {
        // Masking each branch and then merging must equal merging raw
        // branch logits and masking at the end; the sentinel lands on the
        // same cells either way.
        let mut rng = Rng::new(24);
        let cache = RopeCache::new(8, 64, 10_000.0);
        let p = params(2, 4, 16);
        let s = 14;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let mask_last = {
            let positions: Vec<usize> = (0..s).collect();
            let qr = apply_rope_rows(input.q, &positions, &cache);
            let kr = apply_rope_rows(input.k, &positions, &cache);
            let mut ngb = qr.matmul(&kr.transpose());
            ngb.scale(input.scale);
            let q_pos: Vec<usize> = (0..s).map(|i| i / 2 + p.shift()).collect();
            let k_pos: Vec<usize> = (0..s).map(|i| i / 2).collect();
            let qg = apply_rope_rows(input.q, &q_pos, &cache);
            let kg = apply_rope_rows(input.k, &k_pos, &cache);
            let mut grp = qg.matmul(&kg.transpose());
            grp.scale(input.scale);
            let mut merged = Matrix2D::from_fn(s, s, |m, n| {
                if m.saturating_sub(n) < p.neighbor_window && n <= m {
                    ngb.get(m, n)
                } else {
                    grp.get(m, n)
                }
            });
            causal_mask(&mut merged);
            merged
        };
        let mask_first = merged_logits(&input, &p, &cache);
        assert_eq!(mask_first, mask_last);
    }

    #[test]
    fn weights_are_causal_and_normalized() {
        let mut rng = Rng::new(25);
        let cache = RopeCache::new(8, 64, 10_000.0);
        let s = 11;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        for out in [
            vanilla_attention(&input, &cache),
            merge_and_attend(&input, &params(2, 4, 16), &cache),
            swa_attention(&input, &cache, 3),
            chunked_attention(&input, &cache, 4),
        ] {
            for m in 0..s {
                let sum: f32 = out.weights.row(m).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {m} sums to {sum}");
                for n in (m + 1)..s {
                    assert_eq!(out.weights.get(m, n), 0.0, "future weight at ({m}, {n})");
                }
            }
        }
    }

    #[test]
    fn identical_value_rows_pass_through() {
        // Each output row is a convex combination of value rows, so if all
        // value rows are the same vector, that vector comes back unchanged.
        let mut rng = Rng::new(26);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let s = 9;
        let (q, k) = (random_matrix(&mut rng, s, 8), random_matrix(&mut rng, s, 8));
        let proto: Vec<f32> = (0..8).map(|j| j as f32 - 3.0).collect();
        let v = Matrix2D::from_fn(s, 8, |_, j| proto[j]);
        let input = AttentionInput::new(&q, &k, &v);
        let out = vanilla_attention(&input, &cache);
        for m in 0..s {
            for j in 0..8 {
                assert!((out.values.get(m, j) - proto[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cache = RopeCache::new(4, 4, 10_000.0);
        let q = Matrix2D::from_vec(1, 4, vec![0.3, -1.0, 0.5, 2.0]);
        let k = q.clone();
        let v = Matrix2D::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let input = AttentionInput::new(&q, &k, &v);
        let out = vanilla_attention(&input, &cache);
        assert_eq!(out.weights.get(0, 0), 1.0);
        assert_eq!(out.values.row(0), v.row(0));
    }

    #[test]
    fn swa_ignores_keys_outside_window() {
        let mut rng = Rng::new(27);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let s = 10;
        let window = 3;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let base = swa_attention(&AttentionInput::new(&q, &k, &v), &cache, window);
        // Token 2 is outside the window of every query from 5 on; garbling
        // its key and value must leave those rows untouched, bit for bit.
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..8 {
            k2.set(2, j, 99.0);
            v2.set(2, j, -99.0);
        }
        let poked = swa_attention(&AttentionInput::new(&q, &k2, &v2), &cache, window);
        for m in (2 + window)..s {
            assert_eq!(base.values.row(m), poked.values.row(m), "row {m} changed");
        }
        // A query inside the window does see it.
        assert_ne!(base.values.row(3), poked.values.row(3));
    }

    #[test]
    fn chunked_blocks_match_independent_short_sequences() {
        let mut rng = Rng::new(28);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let (lw, blocks) = (5, 3);
        let s = lw * blocks;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let full = chunked_attention(&AttentionInput::new(&q, &k, &v), &cache, lw);
        for b in 0..blocks {
            let slice = |m: &Matrix2D| Matrix2D::from_fn(lw, 8, |i, j| m.get(b * lw + i, j));
            let (qb, kb, vb) = (slice(&q), slice(&k), slice(&v));
            let alone = vanilla_attention(&AttentionInput::new(&qb, &kb, &vb), &cache);
            for i in 0..lw {
                assert_eq!(full.values.row(b * lw + i), alone.values.row(i), "block {b} row {i}");
            }
        }
    }

    #[test]
    fn rerope_equals_bilevel_with_whole_sequence_group() {
        let mut rng = Rng::new(29);
        let cache = RopeCache::new(8, 64, 10_000.0);
        let s = 13;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let a = rerope_attention(&input, &cache, 4, 16);
        let b = merge_and_attend(&input, &params(s, 4, 16), &cache);
        assert_eq!(a.values, b.values);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn short_sequence_is_all_neighbor() {
        // With seq_len <= w_n no grouped cell is ever selected, so the
        // bi-level path and vanilla attention agree exactly.
        let mut rng = Rng::new(30);
        let cache = RopeCache::new(8, 32, 10_000.0);
        let s = 4;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let a = merge_and_attend(&input, &params(3, 6, 16), &cache);
        let b = vanilla_attention(&input, &cache);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn alibi_zero_slope_is_position_free() {
        let mut rng = Rng::new(31);
        let s = 8;
        let (q, k, v) = (
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
            random_matrix(&mut rng, s, 8),
        );
        let input = AttentionInput::new(&q, &k, &v);
        let rel =
            rel_pos_matrix(s, &ExtensionScheme::Vanilla { pretrain_window: s }).unwrap();
        let unbiased = alibi_attention(&input, 0.0, &rel);
        // Reference: plain scaled dot products, causal mask, softmax.
        let mut logits = q.matmul(&k.transpose());
        logits.scale(input.scale);
        causal_mask(&mut logits);
        let want = finish(&input, &logits);
        assert!(unbiased.values.max_abs_diff(&want.values) < 1e-6);
    }

    #[test]
    fn alibi_prefers_near_keys_for_equal_content() {
        // With identical keys, content cannot break ties; the bias must.
        let s = 6;
        let q = Matrix2D::from_fn(s, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let k = q.clone();
        let v = Matrix2D::from_fn(s, 4, |i, _| i as f32);
        let input = AttentionInput::new(&q, &k, &v);
        let rel =
            rel_pos_matrix(s, &ExtensionScheme::Vanilla { pretrain_window: s }).unwrap();
        let out = alibi_attention(&input, 0.5, &rel);
        let last = out.weights.row(s - 1);
        for n in 1..s {
            assert!(last[n] > last[n - 1], "weight should rise toward the query");
        }
    }

    #[test]
    fn bilevel_alibi_bias_bounded_by_window() {
        // On an in-range sequence the remapped distance never reaches L, so
        // the bias never falls below -slope * (L - 1).
        let p = params(2, 4, 7);
        let slopes = AlibiSlopes::geometric(2);
        let scheme = ExtensionScheme::AlibiSelfExtend { params: p, slopes: slopes.clone() };
        let rel = rel_pos_matrix(p.max_extended_length(), &scheme).unwrap();
        let slope = slopes.get(0);
        let floor = alibi_logit_bias(p.pretrain_window - 1, slope);
        for m in 0..rel.seq_len() {
            for n in 0..=m {
                let bias = alibi_logit_bias(rel.get(m, n).unwrap() as usize, slope);
                assert!(bias >= floor, "bias {bias} fell below {floor} at ({m}, {n})");
            }
        }
    }

    use crate::rope::AlibiSlopes;

    #[test]
    fn mha_zero_value_projection_gives_zero_output() {
        let mut rng = Rng::new(32);
        let (s, d) = (6, 8);
        let cache = RopeCache::new(4, 16, 10_000.0);
        let x = random_matrix(&mut rng, s, d);
        let weights = MhaWeights {
            w_q: random_matrix(&mut rng, d, d),
            w_k: random_matrix(&mut rng, d, d),
            w_v: Matrix2D::zeros(d, d),
            w_o: random_matrix(&mut rng, d, d),
            n_heads: 2,
        };
        let out = multi_head_attention(
            &x,
            &weights,
            &ExtensionScheme::Vanilla { pretrain_window: 16 },
            &cache,
        );
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_single_head_matches_manual_composition() {
        let mut rng = Rng::new(33);
        let (s, d) = (7, 8);
        let cache = RopeCache::new(8, 16, 10_000.0);
        let x = random_matrix(&mut rng, s, d);
        let weights = MhaWeights {
            w_q: random_matrix(&mut rng, d, d),
            w_k: random_matrix(&mut rng, d, d),
            w_v: random_matrix(&mut rng, d, d),
            w_o: random_matrix(&mut rng, d, d),
            n_heads: 1,
        };
        let scheme = ExtensionScheme::Vanilla { pretrain_window: 16 };
        let got = multi_head_attention(&x, &weights, &scheme, &cache);
        let (q, k, v) =
            (x.matmul(&weights.w_q), x.matmul(&weights.w_k), x.matmul(&weights.w_v));
        let head = vanilla_attention(&AttentionInput::new(&q, &k, &v), &cache);
        let want = head.values.matmul(&weights.w_o);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn mha_runs_every_scheme_finite() {
        let mut rng = Rng::new(34);
        let (s, d) = (12, 8);
        let cache = RopeCache::new(4, 64, 10_000.0);
        let x = random_matrix(&mut rng, s, d);
        let weights = MhaWeights {
            w_q: random_matrix(&mut rng, d, d),
            w_k: random_matrix(&mut rng, d, d),
            w_v: random_matrix(&mut rng, d, d),
            w_o: random_matrix(&mut rng, d, d),
            n_heads: 2,
        };
        let slopes = AlibiSlopes::geometric(2);
        let p = params(2, 4, 8);
        let schemes = [
            ExtensionScheme::Vanilla { pretrain_window: 16 },
            ExtensionScheme::SelfExtend(p),
            ExtensionScheme::ReRope { neighbor_window: 4, pretrain_window: 8 },
            ExtensionScheme::SlidingWindow { window: 4 },
            ExtensionScheme::Chunked { local_window: 4 },
            ExtensionScheme::Alibi { slopes: slopes.clone() },
            ExtensionScheme::AlibiSelfExtend { params: p, slopes },
        ];
        for scheme in &schemes {
            let out = multi_head_attention(&x, &weights, scheme, &cache);
            assert!(out.all_finite(), "{} produced non-finite output", scheme.describe());
        }
    }

    #[test]
    #[should_panic(expected = "w_q must be")]
    fn mha_rejects_mismatched_projections() {
        let x = Matrix2D::zeros(4, 8);
        let cache = RopeCache::new(4, 8, 10_000.0);
        let weights = MhaWeights {
            w_q: Matrix2D::zeros(6, 6),
            w_k: Matrix2D::zeros(8, 8),
            w_v: Matrix2D::zeros(8, 8),
            w_o: Matrix2D::zeros(8, 8),
            n_heads: 2,
        };
        let _ = multi_head_attention(
            &x,
            &weights,
            &ExtensionScheme::Vanilla { pretrain_window: 8 },
            &cache,
        );
    }

    #[test]
    fn merge_mask_csv_shape() {
        let mask = merge_mask(3, 1);
        assert_eq!(mask.to_csv(), "1,0,0\n0,1,0\n0,0,1\n");
    }
}
