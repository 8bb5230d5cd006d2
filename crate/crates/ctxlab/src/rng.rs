//! Seeded random number generation with a fixed, documented algorithm.
//!
//! The generator is xoshiro256++ (Blackman & Vigna, public domain), seeded
//! by running SplitMix64 over the user seed. Both algorithms are pure
//! integer arithmetic, so the stream is bit-identical across platforms and
//! compiler versions — which is what makes "same seed, same experiment,
//! same bytes" a property the rest of the crate can promise.

/// Deterministic 64-bit generator (xoshiro256++ seeded via SplitMix64).
#[derive(Debug, Clone)]
pub struct Rng {
    /// Seed the stream was started from, kept for config echo in reports.
    pub seed: u64,
    state: [u64; 4],
}

impl Rng {
    /// Builds a generator from a seed. Any seed is valid, including 0
    /// (SplitMix64 expansion never produces the all-zero xoshiro state).
    #[must_use]
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut next_sm = || {
            sm = sm.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        };
        let state = [next_sm(), next_sm(), next_sm(), next_sm()];
        Rng { seed, state }
    }

    /// Derives an independent stream from this seed and a stream index.
    ///
    /// Used to hand each grid cell of an evaluation its own generator so
    /// serial and fanned-out runs draw identical samples per cell.
    #[must_use]
    pub fn derive(&self, stream: u64) -> Rng {
        // Mix the stream index through SplitMix64 so neighboring indices
        // land far apart in seed space.
        let mut z = self.seed ^ stream.wrapping_mul(0xd1342543de82ef95);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        Rng::new(z ^ (z >> 31))
    }

    /// Next raw 64-bit output (xoshiro256++ scrambler).
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw from `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw from `[lo, hi)`. Panics if `lo >= hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "uniform: empty range [{lo}, {hi})");
        lo + (hi - lo) * self.next_f64()
    }

    /// Normal draw via Box–Muller. Each call consumes exactly two raw
    /// outputs, so the stream position does not depend on the values drawn.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // Map onto (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0);
        let u2 = self.next_f64();
        mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer from `[lo, hi)`. Panics if `lo >= hi`.
    ///
    /// Unbiased: draws above the largest multiple of the range are
    /// rejected rather than folded in.
    pub fn int(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo < hi, "int: empty range [{lo}, {hi})");
        let range = hi.wrapping_sub(lo) as u64;
        let accept_below = (u64::MAX / range) * range;
        loop {
            let r = self.next_u64();
            if r < accept_below {
                return lo.wrapping_add((r % range) as i64);
            }
        }
    }

    /// Uniform index from `[0, n)`, for picking out of slices.
    pub fn index(&mut self, n: usize) -> usize {
        self.int(0, n as i64) as usize
    }
}
