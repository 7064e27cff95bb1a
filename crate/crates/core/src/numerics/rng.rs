//! Seeded random generation: xoshiro256** seeded through SplitMix64, with
//! Box-Muller normals. Hand-rolled so the stream is fixed by the seed alone,
//! independent of any external crate's version.

use super::matrix::Matrix;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed, a purpose tag, and an index.
///
/// All randomness in a run flows from one root seed through this function
/// (root, tag, index), so stages can be replayed independently and per-layer
/// streams cannot interleave.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut s = root ^ 0x6A09E667F3BCC908;
    let mut h = splitmix64(&mut s);
    for &b in tag.as_bytes() {
        s = h ^ b as u64;
        h = splitmix64(&mut s);
    }
    s = h ^ index;
    splitmix64(&mut s)
}

/// xoshiro256** with an explicit 64-bit seed.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, cached_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-bound, bound].
    #[inline]
    pub fn uniform_symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * bound
    }

    /// Standard normal via Box-Muller; pairs are generated together and the
    /// second variate is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Matrix of i.i.d. standard normal entries.
    pub fn sample_gaussian(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = self.standard_normal();
        }
        m
    }

    /// Matrix of i.i.d. uniform entries on [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    /// the Kaiming-uniform bound with negative-slope parameter a = sqrt(5).
    pub fn sample_kaiming_uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = self.uniform_symmetric(bound);
        }
        m
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        idx
    }
}
