//! Minimal deterministic random number generator.
//!
//! Experiments must replicate bit-for-bit across runs and across language
//! ports, so randomness goes through a single 64-bit linear congruential
//! generator with Knuth's MMIX constants (a = 6364136223846793005,
//! c = 1442695040888963407) instead of a platform RNG.

/// 64-bit LCG, `state <- a * state + c` with the MMIX constants.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

const MULTIPLIER: u64 = 6364136223846793005;
const INCREMENT: u64 = 1442695040888963407;

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        // Avoid the short low-entropy warm-up of tiny seeds.
        let mut rng = Lcg64 { state: seed.wrapping_add(INCREMENT) };
        rng.next_u64();
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        self.state
    }

    /// Uniform double in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut a = Lcg64::new(42);
        let mut b = Lcg64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = Lcg64::new(7);
        for _ in 0..10_000 {
            let x = rng.uniform(0.25, 0.75);
            assert!((0.25..0.75).contains(&x));
        }
    }
}
