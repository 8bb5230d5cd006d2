//! Rotary position embeddings and ALiBi linear biases.
//!
//! Rotary embeddings rotate adjacent coordinate pairs `(v[2d], v[2d+1])` of
//! a query or key by an angle `pos * theta_d`, with per-pair frequencies
//! `theta_d = base^(-2d / head_dim)`. The payoff is that the dot product of
//! two rotated vectors depends on the positions only through their
//! difference, which is exactly the property the position-remapping schemes
//! in [`crate::positions`] lean on.
//!
//! ALiBi skips rotation entirely and subtracts `slope * distance` from each
//! logit, with a per-head geometric slope schedule.

use crate::tensor::Matrix2D;

/// Precomputed cos/sin tables for rotary embeddings.
///
/// Angles are computed in f64 and stored as f32, one row per absolute
/// position, one column per coordinate pair. Sized once, up front, to the
/// largest position an experiment will touch.
#[derive(Debug, Clone)]
pub struct RopeCache {
    head_dim: usize,
    max_pos: usize,
    base: f32,
    /// `cos[pos * head_dim/2 + d]`, row-major.
    cos: Vec<f32>,
    /// Same layout as `cos`.
    sin: Vec<f32>,
}

impl RopeCache {
    /// Builds tables covering positions `0..max_pos` for vectors of
    /// `head_dim` coordinates. Panics if `head_dim` is odd or zero, or if
    /// `max_pos` is zero.
    #[must_use]
    pub fn new(head_dim: usize, max_pos: usize, base: f32) -> Self {
        assert!(head_dim > 0 && head_dim % 2 == 0, "head_dim must be even, got {head_dim}");
        assert!(max_pos > 0, "max_pos must be positive");
        assert!(base > 0.0, "base must be positive, got {base}");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for d in 0..half {
                let theta = f64::from(base).powf(-2.0 * d as f64 / head_dim as f64);
                let angle = pos as f64 * theta;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        RopeCache { head_dim, max_pos, base, cos, sin }
    }

    #[inline]
    #[must_use]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    #[must_use]
    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    #[inline]
    #[must_use]
    pub fn base(&self) -> f32 {
        self.base
    }

    /// Cos/sin row for one position.
    #[inline]
    fn tables(&self, pos: usize) -> (&[f32], &[f32]) {
        assert!(pos < self.max_pos, "position {pos} outside cache (max_pos {})", self.max_pos);
        let half = self.head_dim / 2;
        (&self.cos[pos * half..(pos + 1) * half], &self.sin[pos * half..(pos + 1) * half])
    }
}

/// Rotates `v` to position `pos`: each pair `(v[2d], v[2d+1])` turns by
/// `pos * theta_d`. Panics if the length doesn't match the cache or the
/// position is outside it.
#[must_use]
pub fn apply_rope(v: &[f32], pos: usize, cache: &RopeCache) -> Vec<f32> {
    assert_eq!(v.len(), cache.head_dim, "vector length {} != head_dim {}", v.len(), cache.head_dim);
    let (cos, sin) = cache.tables(pos);
    let mut out = vec![0.0f32; v.len()];
    for d in 0..v.len() / 2 {
        let (x, y) = (v[2 * d], v[2 * d + 1]);
        let (c, s) = (cos[d], sin[d]);
        out[2 * d] = c * x - s * y;
        out[2 * d + 1] = s * x + c * y;
    }
    out
}

/// Rotates every row of `m`, taking the position of row `i` from
/// `positions[i]`. Panics on length mismatch.
#[must_use]
pub fn apply_rope_rows(m: &Matrix2D, positions: &[usize], cache: &RopeCache) -> Matrix2D {
    assert_eq!(m.rows(), positions.len(), "one position per row required");
    let mut out = Matrix2D::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let rotated = apply_rope(m.row(i), positions[i], cache);
        out.row_mut(i).copy_from_slice(&rotated);
    }
    out
}

/// Inverse rotation: undoes [`apply_rope`] at the same position. Used by
/// backpropagation, where the adjoint of a rotation is the rotation by the
/// opposite angle.
#[must_use]
pub fn apply_rope_inverse(v: &[f32], pos: usize, cache: &RopeCache) -> Vec<f32> {
    assert_eq!(v.len(), cache.head_dim, "vector length {} != head_dim {}", v.len(), cache.head_dim);
    let (cos, sin) = cache.tables(pos);
    let mut out = vec![0.0f32; v.len()];
    for d in 0..v.len() / 2 {
        let (x, y) = (v[2 * d], v[2 * d + 1]);
        let (c, s) = (cos[d], sin[d]);
        out[2 * d] = c * x + s * y;
        out[2 * d + 1] = c * y - s * x;
    }
    out
}

/// Dot product of `q` rotated to position `m` with `k` rotated to position
/// `n`. By the rotation structure this depends on the positions only
/// through `m - n`, up to float rounding.
#[must_use]
pub fn rope_dot(q: &[f32], m: usize, k: &[f32], n: usize, cache: &RopeCache) -> f32 {
    let qr = apply_rope(q, m, cache);
    let kr = apply_rope(k, n, cache);
    qr.iter().zip(&kr).map(|(a, b)| a * b).sum()
}

/// Per-head ALiBi slope schedule.
///
/// Slopes are strictly positive and non-increasing across heads; both are
/// enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiSlopes(Vec<f32>);

impl AlibiSlopes {
    /// Wraps an explicit slope list. Panics if empty, non-positive, or
    /// increasing anywhere.
    #[must_use]
    pub fn new(slopes: Vec<f32>) -> Self {
        assert!(!slopes.is_empty(), "at least one slope required");
        for &s in &slopes {
            assert!(s > 0.0, "slopes must be strictly positive, got {s}");
        }
        for w in slopes.windows(2) {
            assert!(w[0] >= w[1], "slopes must be non-increasing, got {} then {}", w[0], w[1]);
        }
        AlibiSlopes(slopes)
    }

    /// Geometric schedule `2^(-8h/H)` for heads `h = 1..=H`.
    ///
    /// One head gets `2^-8`; eight heads run from `2^-1` down to `2^-8`.
    #[must_use]
    pub fn geometric(n_heads: usize) -> Self {
        assert!(n_heads > 0, "at least one head required");
        let slopes = (1..=n_heads)
            .map(|h| (2.0f64).powf(-8.0 * h as f64 / n_heads as f64) as f32)
            .collect();
        AlibiSlopes(slopes)
    }

    #[inline]
    #[must_use]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Slope for head `h` (0-indexed).
    #[inline]
    #[must_use]
    pub fn get(&self, h: usize) -> f32 {
        self.0[h]
    }

    #[inline]
    #[must_use]
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Additive ALiBi logit bias `-slope * rel_pos`.
///
/// Taking the relative distance (not absolute positions) makes translation
/// invariance structural: equal distances get equal biases by construction.
#[inline]
#[must_use]
pub fn alibi_logit_bias(rel_pos: usize, slope: f32) -> f32 {
    -slope * rel_pos as f32
}
