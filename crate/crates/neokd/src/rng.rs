//! Deterministic random streams.
//!
//! All randomness in the crate flows from one root seed, fanned out into
//! labeled sub-streams (`"init"`, `"shuffle"`, `"attack-start"`, ...) so that
//! adding a consumer never perturbs the draws seen by another. Streams are
//! derived statelessly from `(root, label, indices)`, which is what makes
//! checkpoint resume bitwise-reproducible: the stream position is implied by
//! the epoch/batch indices, never stored.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { state: seed }
    }

    /// Stream derived from `(root, label)`.
    pub fn labeled(root: u64, label: &str) -> Self {
        Stream::new(splitmix_finalize(root ^ fnv1a(label.as_bytes())))
    }

    /// Stream derived from `(root, label, indices)`. Index order matters.
    pub fn indexed(root: u64, label: &str, indices: &[u64]) -> Self {
        let mut h = splitmix_finalize(root ^ fnv1a(label.as_bytes()));
        for &i in indices {
            h = splitmix_finalize(h ^ i.wrapping_mul(GOLDEN));
        }
        Stream::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix_finalize(self.state)
    }

    /// Uniform in `[0, 1)` with 24 bits of mantissa.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_f32_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f32 {
        let u1 = 1.0 - self.next_f32() as f64; // (0, 1]
        let u2 = self.next_f32() as f64;
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    /// Uniform integer in `[0, n)`. Modulo bias is below 2^-40 for desk-scale n.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// A fresh random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_streams_are_independent_and_reproducible() {
        let mut a1 = Stream::labeled(7, "init");
        let mut a2 = Stream::labeled(7, "init");
        let mut b = Stream::labeled(7, "shuffle");
        let xs1: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn indexed_streams_depend_on_index_order() {
        let a = Stream::indexed(3, "attack", &[1, 2]).next_u64();
        let b = Stream::indexed(3, "attack", &[2, 1]).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = Stream::labeled(11, "u");
        for _ in 0..10_000 {
            let x = s.next_f32();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = Stream::labeled(5, "perm");
        let p = s.permutation(100);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut s = Stream::labeled(13, "gauss");
        let n = 50_000;
        let mut sum = 0f64;
        let mut sumsq = 0f64;
        for _ in 0..n {
            let g = s.next_gaussian() as f64;
            sum += g;
            sumsq += g * g;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
