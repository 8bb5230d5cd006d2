//! Integer relative-position arithmetic for every attention variant.
//!
//! A model pretrained at context `L` has only ever seen relative distances
//! `0..L-1`. The bi-level remapping keeps the `w_n` nearest distances exact
//! and floor-divides everything farther away by a group size `G_s`, shifted
//! so the two regions meet without a gap:
//!
//! ```text
//! entry(m, n) = m - n                                   if m - n < w_n
//!             = (m / G_s + shift) - (n / G_s)           otherwise
//! shift       = w_n - w_n / G_s                         (integer division)
//! ```
//!
//! Everything here is exact integer arithmetic, so properties like "no
//! remapped distance ever exceeds `L - 1`" can be checked by enumeration
//! rather than tolerance.

use crate::rope::AlibiSlopes;

// ── Scalar helpers ──────────────────────────────────────────────────────────

/// Floor-divides a position index by the group size. Panics if `group_size`
/// is zero.
#[inline]
#[must_use]
pub fn floor_group(pos: usize, group_size: usize) -> usize {
    assert!(group_size > 0, "group_size must be >= 1");
    pos / group_size
}

/// Offset added to grouped query positions so the grouped region continues
/// seamlessly where the exact neighbor region ends: `w_n - w_n / G_s`.
#[inline]
#[must_use]
pub fn shift_amount(neighbor_window: usize, group_size: usize) -> usize {
    assert!(group_size > 0, "group_size must be >= 1");
    neighbor_window - neighbor_window / group_size
}

/// Longest sequence the bi-level remapping keeps inside the pretrained
/// distance range. The largest remapped distance in a sequence of `S`
/// tokens is `(S-1)/G_s + w_n - w_n/G_s` (integer division, reached by the
/// last query against the first key), so the largest `S` keeping every
/// distance at most `L - 1` is exactly `(L - w_n + w_n/G_s) * G_s`. When
/// `G_s` divides `w_n` this equals the familiar `(L - w_n) * G_s + w_n`;
/// otherwise it is smaller by `w_n mod G_s` — the rounded form would let
/// the far corner overshoot the trained range by one. Panics unless
/// `1 <= w_n < L` and `G_s >= 1`.
#[inline]
#[must_use]
pub fn max_extended_length(pretrain_window: usize, neighbor_window: usize, group_size: usize) -> usize {
    assert!(group_size >= 1, "group_size must be >= 1");
    assert!(
        neighbor_window >= 1 && neighbor_window < pretrain_window,
        "neighbor_window must satisfy 1 <= w_n < L (got w_n = {neighbor_window}, L = {pretrain_window})"
    );
    (pretrain_window - neighbor_window + neighbor_window / group_size) * group_size
}

/// Reach of grouping alone, with no exact neighbor region: `L * G_s`.
#[inline]
#[must_use]
pub fn grouped_only_max_length(pretrain_window: usize, group_size: usize) -> usize {
    assert!(group_size >= 1, "group_size must be >= 1");
    pretrain_window * group_size
}

// ── Scheme parameters ───────────────────────────────────────────────────────

/// Parameters of the bi-level remapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfExtendParams {
    /// Denominator of the floor division applied to far positions (`G_s`).
    pub group_size: usize,
    /// Number of nearest distances kept exact (`w_n`).
    pub neighbor_window: usize,
    /// Context length the model was trained at (`L`).
    pub pretrain_window: usize,
}

impl SelfExtendParams {
    /// Checks `G_s >= 1` and `1 <= w_n < L`.
    pub fn validate(&self) -> crate::Result<()> {
        if self.group_size < 1 {
            return Err(crate::Error::Config("group_size must be >= 1".into()));
        }
        if self.neighbor_window < 1 || self.neighbor_window >= self.pretrain_window {
            return Err(crate::Error::Config(format!(
                "neighbor_window must satisfy 1 <= w_n < L (got w_n = {}, L = {})",
                self.neighbor_window, self.pretrain_window
            )));
        }
        Ok(())
    }

    /// `shift_amount` for these parameters.
    #[inline]
    #[must_use]
    pub fn shift(&self) -> usize {
        shift_amount(self.neighbor_window, self.group_size)
    }

    /// `max_extended_length` for these parameters.
    #[inline]
    #[must_use]
    pub fn max_extended_length(&self) -> usize {
        max_extended_length(self.pretrain_window, self.neighbor_window, self.group_size)
    }
}

/// How attention maps token positions to the relative distances the model
/// actually sees.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtensionScheme {
    /// Unmodified positions; out of distribution past `pretrain_window`.
    Vanilla { pretrain_window: usize },
    /// Bi-level remapping: exact below `w_n`, floor-divided above.
    SelfExtend(SelfExtendParams),
    /// Far distances all collapse to `w_n`; the `group_size >= seq_len`
    /// limit of [`ExtensionScheme::SelfExtend`], run through the same code.
    ReRope { neighbor_window: usize, pretrain_window: usize },
    /// Keys farther than `window` are masked out entirely.
    SlidingWindow { window: usize },
    /// Attention confined to fixed blocks `[k*local_window, (k+1)*local_window)`;
    /// positions restart inside each block.
    Chunked { local_window: usize },
    /// No rotation; logits get `-slope * distance` with unmodified distances.
    Alibi { slopes: AlibiSlopes },
    /// ALiBi bias computed on bi-level remapped distances.
    AlibiSelfExtend { params: SelfExtendParams, slopes: AlibiSlopes },
}

impl ExtensionScheme {
    /// Validates scheme parameters; used by the CLI before any work runs.
    pub fn validate(&self) -> crate::Result<()> {
        match self {
            ExtensionScheme::Vanilla { pretrain_window } => {
                if *pretrain_window == 0 {
                    return Err(crate::Error::Config("pretrain_window must be >= 1".into()));
                }
            }
            ExtensionScheme::SelfExtend(p) => p.validate()?,
            ExtensionScheme::ReRope { neighbor_window, pretrain_window } => {
                if *neighbor_window < 1 || neighbor_window >= pretrain_window {
                    return Err(crate::Error::Config(format!(
                        "neighbor_window must satisfy 1 <= w_n < L (got w_n = {neighbor_window}, L = {pretrain_window})"
                    )));
                }
            }
            ExtensionScheme::SlidingWindow { window } => {
                if *window < 1 {
                    return Err(crate::Error::Config("window must be >= 1".into()));
                }
            }
            ExtensionScheme::Chunked { local_window } => {
                if *local_window < 1 {
                    return Err(crate::Error::Config("local_window must be >= 1".into()));
                }
            }
            ExtensionScheme::Alibi { .. } => {}
            ExtensionScheme::AlibiSelfExtend { params, .. } => params.validate()?,
        }
        Ok(())
    }

    /// Longest sequence whose remapped distances all stay inside the
    /// pretrained range, or `None` when the scheme bounds distances by
    /// construction at any length.
    #[must_use]
    pub fn max_safe_length(&self) -> Option<usize> {
        match self {
            ExtensionScheme::Vanilla { pretrain_window } => Some(*pretrain_window),
            ExtensionScheme::SelfExtend(p) | ExtensionScheme::AlibiSelfExtend { params: p, .. } => {
                Some(p.max_extended_length())
            }
            // Far distances clamp to w_n, a window masks them, blocks
            // restart them, and plain ALiBi has no position table to
            // overrun — none of these runs out of range.
            ExtensionScheme::ReRope { .. }
            | ExtensionScheme::SlidingWindow { .. }
            | ExtensionScheme::Chunked { .. }
            | ExtensionScheme::Alibi { .. } => None,
        }
    }

    /// Short lowercase name used in report files and file names.
    #[must_use]
    pub fn label(&self) -> &'static str {
        match self {
            ExtensionScheme::Vanilla { .. } => "vanilla",
            ExtensionScheme::SelfExtend(_) => "selfextend",
            ExtensionScheme::ReRope { .. } => "rerope",
            ExtensionScheme::SlidingWindow { .. } => "swa",
            ExtensionScheme::Chunked { .. } => "chunked",
            ExtensionScheme::Alibi { .. } => "alibi",
            ExtensionScheme::AlibiSelfExtend { .. } => "alibi_selfextend",
        }
    }

    /// Full human-readable descriptor with parameters, for report headers.
    #[must_use]
    pub fn describe(&self) -> String {
        match self {
            ExtensionScheme::Vanilla { pretrain_window } => {
                format!("vanilla(L={pretrain_window})")
            }
            ExtensionScheme::SelfExtend(p) => format!(
                "selfextend(G_s={}, w_n={}, L={})",
                p.group_size, p.neighbor_window, p.pretrain_window
            ),
            ExtensionScheme::ReRope { neighbor_window, pretrain_window } => {
                format!("rerope(w_n={neighbor_window}, L={pretrain_window})")
            }
            ExtensionScheme::SlidingWindow { window } => format!("swa(window={window})"),
            ExtensionScheme::Chunked { local_window } => {
                format!("chunked(local_window={local_window})")
            }
            ExtensionScheme::Alibi { slopes } => format!("alibi(heads={})", slopes.len()),
            ExtensionScheme::AlibiSelfExtend { params: p, slopes } => format!(
                "alibi_selfextend(G_s={}, w_n={}, L={}, heads={})",
                p.group_size,
                p.neighbor_window,
                p.pretrain_window,
                slopes.len()
            ),
        }
    }
}

// ── Relative-position matrices ──────────────────────────────────────────────

/// The full `seq_len x seq_len` table of remapped relative distances a
/// scheme presents to the model. `None` cells are masked (non-causal cells
/// always; additionally out-of-window or cross-block cells for the local
/// schemes).
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosMatrix {
    seq_len: usize,
    entries: Vec<Option<u32>>,
    ood: bool,
}

impl RelPosMatrix {
    #[inline]
    #[must_use]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Entry for query `m`, key `n`; `None` if masked.
    #[inline]
    #[must_use]
    pub fn get(&self, m: usize, n: usize) -> Option<u32> {
        debug_assert!(m < self.seq_len && n < self.seq_len);
        self.entries[m * self.seq_len + n]
    }

    /// True when the sequence is longer than the scheme can keep inside the
    /// pretrained distance range; results are then out of distribution for
    /// the model but still well defined.
    #[inline]
    #[must_use]
    pub fn out_of_distribution(&self) -> bool {
        self.ood
    }

    /// Largest unmasked entry, or `None` for a 0-length matrix.
    #[must_use]
    pub fn max_entry(&self) -> Option<u32> {
        self.entries.iter().flatten().copied().max()
    }

    /// CSV rendering: one row per query index, masked cells left empty.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.seq_len).map(|n| format!("key{n}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for m in 0..self.seq_len {
            let row: Vec<String> = (0..self.seq_len)
                .map(|n| self.get(m, n).map(|e| e.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds the relative-position table a scheme induces on a sequence of
/// `seq_len` tokens. Panics on `seq_len == 0`; invalid scheme parameters
/// surface as a `Config` error.
pub fn rel_pos_matrix(seq_len: usize, scheme: &ExtensionScheme) -> crate::Result<RelPosMatrix> {
    assert!(seq_len > 0, "seq_len must be >= 1");
    scheme.validate()?;
    let entry = |m: usize, n: usize| -> Option<u32> {
        debug_assert!(n <= m);
        let dist = m - n;
        match scheme {
            ExtensionScheme::Vanilla { .. } | ExtensionScheme::Alibi { .. } => Some(dist as u32),
            ExtensionScheme::SelfExtend(p) | ExtensionScheme::AlibiSelfExtend { params: p, .. } => {
                if dist < p.neighbor_window {
                    Some(dist as u32)
                } else {
                    let g = p.group_size;
                    Some((floor_group(m, g) + p.shift() - floor_group(n, g)) as u32)
                }
            }
            ExtensionScheme::ReRope { neighbor_window, .. } => {
                Some(dist.min(*neighbor_window) as u32)
            }
            ExtensionScheme::SlidingWindow { window } => {
                if dist < *window {
                    Some(dist as u32)
                } else {
                    None
                }
            }
            ExtensionScheme::Chunked { local_window } => {
                if m / local_window == n / local_window {
                    Some(dist as u32)
                } else {
                    None
                }
            }
        }
    };
    let mut entries = vec![None; seq_len * seq_len];
    for m in 0..seq_len {
        for n in 0..=m {
            entries[m * seq_len + n] = entry(m, n);
        }
    }
    let ood = matches!(scheme.max_safe_length(), Some(safe) if seq_len > safe);
    Ok(RelPosMatrix { seq_len, entries, ood })
}

// ── Feasibility rule ────────────────────────────────────────────────────────

/// Decides whether parameters `(L, N, W, G)` leave enough exact-position
/// context: `L / 2 > W + (N - W) / G`, evaluated in exact rational
/// arithmetic with a strict inequality.
///
/// `L` is the pretraining context, `N` the target length, `W` the neighbor
/// window, `G` the group size. Panics unless `W < L <= N` and `G >= 1`.
#[must_use]
pub fn check_rule(pretrain: u64, target: u64, neighbor: u64, group: u64) -> bool {
    assert!(group >= 1, "group size must be >= 1");
    assert!(
        neighbor < pretrain && pretrain <= target,
        "rule requires W < L <= N (got W = {neighbor}, L = {pretrain}, N = {target})"
    );
    // Multiply both sides by 2G to stay in integers:
    //   L/2 > W + (N-W)/G   <=>   L*G > 2*W*G + 2*(N-W)
    let lhs = u128::from(pretrain) * u128::from(group);
    let rhs = 2 * u128::from(neighbor) * u128::from(group) + 2 * u128::from(target - neighbor);
    lhs > rhs
}

/// Smallest group size `G >= 1` satisfying [`check_rule`], or `None` when no
/// finite group size can (which happens exactly when `W >= L / 2`).
#[must_use]
pub fn min_feasible_group(pretrain: u64, target: u64, neighbor: u64) -> Option<u64> {
    assert!(
        neighbor < pretrain && pretrain <= target,
        "rule requires W < L <= N (got W = {neighbor}, L = {pretrain}, N = {target})"
    );
    // As G grows the rule's right side falls toward W, so a solution exists
    // iff L/2 > W, i.e. 2W < L. Solving L*G > 2*W*G + 2*(N-W) for G:
    //   G > 2*(N-W) / (L - 2W)
    // and the smallest integer strictly above a nonnegative rational a/b is
    // a/b + 1 in integer division, whether or not b divides a.
    if 2 * neighbor >= pretrain {
        return None;
    }
    let a = 2 * u128::from(target - neighbor);
    let b = u128::from(pretrain - 2 * neighbor);
    let g = (a / b + 1) as u64;
    debug_assert!(check_rule(pretrain, target, neighbor, g));
    debug_assert!(g == 1 || !check_rule(pretrain, target, neighbor, g - 1));
    Some(g)
}
