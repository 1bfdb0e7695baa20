//! Deterministic random number generation.
//!
//! The generator is SplitMix64: a 64-bit counter stepped by the constant
//! 0x9E3779B97F4A7C15 and scrambled by two xor-shift-multiply rounds
//! (Steele, Lea & Flood, "Fast splittable pseudorandom number generators",
//! OOPSLA 2014). It is fully defined by integer arithmetic, so identical
//! seeds give identical streams on every platform.
//!
//! Reference outputs for seed 0 (first three `next_u64` values, also pinned
//! by a unit test below):
//!
//! ```text
//! 0xE220A8397B1DCDAF
//! 0x6E789E6AA1B965F4
//! 0x06C45D188009454F
//! ```

/// SplitMix64 stream. Not cryptographic; used for reproducible shuffles,
/// crops, dropout masks and weight initialization.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream for subtask `tag`. Used to hand each
    /// sample/image its own generator so parallel work stays deterministic.
    pub fn fork(&mut self, tag: u64) -> Rng {
        let base = self.next_u64();
        Rng::new(base ^ tag.wrapping_mul(0x9E3779B97F4A7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi);
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses the 128-bit multiply-shift reduction,
    /// which is exact enough for shuffles and crop offsets (bias < 2^-64·n).
    pub fn randint(&mut self, n: usize) -> usize {
        debug_assert!(n >= 1);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.randint(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_stream_seed_zero() {
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(1234);
        let mut b = Rng::new(1234);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge_quickly() {
        // Sanity, not a cryptographic claim: the first 16 draws must differ
        // somewhere for nearby seeds.
        for s in 0..32u64 {
            let mut a = Rng::new(s);
            let mut b = Rng::new(s + 1);
            let diverged = (0..16).any(|_| a.next_u64() != b.next_u64());
            assert!(diverged, "seeds {s} and {} agree on 16 draws", s + 1);
        }
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = Rng::new(7);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
            sum += x;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_tight_interval() {
        let mut rng = Rng::new(9);
        let lo = 1.0;
        let hi = 1.0 + 1e-9;
        for _ in 0..1000 {
            let x = rng.uniform(lo, hi);
            assert!(x >= lo && x < hi);
        }
    }

    #[test]
    fn randint_bounds() {
        let mut rng = Rng::new(11);
        let mut seen = [false; 7];
        for _ in 0..10_000 {
            let k = rng.randint(7);
            assert!(k < 7);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s), "all residues reachable");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = Rng::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
