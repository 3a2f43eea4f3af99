//! Pinned pseudo-random generator for model initialization and tests.
//!
//! Seeding runs the seed once through SplitMix64 so that small or zero seeds
//! still yield a nonzero state:
//!
//! ```text
//! z = seed + 0x9E3779B97F4A7C15
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! state = z ^ (z >> 31)            (replaced by 1 if it comes out 0)
//! ```
//!
//! Each draw is one xorshift64* step (all arithmetic wrapping mod 2^64):
//!
//! ```text
//! x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;
//! out = x * 0x2545F4914F6CDD1D
//! ```
//!
//! `next_f64` maps `out >> 11` to `[0, 1)` by multiplying with `2^-53`.

#[derive(Debug, Clone)]
pub struct Xorshift64Star {
    state: u64,
}

impl Xorshift64Star {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self {
            state: if z == 0 { 1 } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n
    }

    pub fn bool(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_sequence() {
        // Frozen so that a change to the update equations is caught.
        let mut r = Xorshift64Star::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        let mut again = Xorshift64Star::new(0);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(first, PINNED_SEED0);
    }

    const PINNED_SEED0: [u64; 3] = [8916199331640804048, 16032783972208265725, 12954103179475586193];

    #[test]
    fn unit_interval() {
        let mut r = Xorshift64Star::new(42);
        for _ in 0..10_000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }
}
