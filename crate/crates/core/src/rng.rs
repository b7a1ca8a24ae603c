//! Portable pseudo-random number generation.
//!
//! Every stochastic component draws from [`Xoshiro256`], the xoshiro256** generator of
//! Blackman and Vigna, seeded by expanding a single `u64` through SplitMix64. Both
//! algorithms are a handful of shifts, rotations and multiplications, so a seed produces the
//! same stream in any language that reimplements them:
//!
//! ```text
//! splitmix64(x):   x += 0x9E3779B97F4A7C15
//!                  z = x
//!                  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!                  z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                  return z ^ (z >> 31)
//!
//! next():          result = rotl(s1 * 5, 7) * 9
//!                  t = s1 << 17
//!                  s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!                  s2 ^= t;  s3 = rotl(s3, 45)
//!
//! next_f64():      (next() >> 11) * 2^-53          in [0, 1)
//! ```

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Xoshiro256 {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Xoshiro256 {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Xoshiro256 { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw from `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Index drawn from a cumulative distribution table whose last entry is (close to) 1.
    pub fn categorical(&mut self, cdf: &[f64]) -> usize {
        let u = self.next_f64() * cdf[cdf.len() - 1];
        // first index with cdf > u
        let idx = cdf.partition_point(|&p| p <= u);
        idx.min(cdf.len() - 1)
    }
}

/// Turns a probability vector into a cumulative table for [`Xoshiro256::categorical`].
pub fn cumulative(probs: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .into_iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}
