//! Counter-based pseudorandom generator.
//!
//! Every random draw in the crate flows through [`RngState`], a keyed
//! splitmix-style counter generator: the output at counter `i` is a pure
//! function of `(seed, stream, i)`, with no global state and no
//! platform-dependent integer behavior. Independent subsystems (degradation,
//! training batches, per-tile sampling noise) take distinct stream ids, so
//! parallel work can pre-draw its randomness without coordination.

/// splitmix64 finalizer: a full-avalanche 64-bit mixing function.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    key: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix(seed ^ mix(stream.wrapping_mul(GOLDEN) ^ 0x6a09_e667_f3bc_c909));
        RngState { key, counter: 0 }
    }

    /// Derive a child generator; children with distinct ids are independent.
    pub fn substream(&self, id: u64) -> RngState {
        RngState::new(self.key, id)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn uniform_int_range(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.uniform_int((hi - lo + 1) as u64) as i64
    }

    /// Standard normal via Box-Muller; consumes two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        // Guard against ln(0).
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.normal() as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_reproduce() {
        let mut a = RngState::new(42, 7);
        let mut b = RngState::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngState::new(42, 0);
        let mut b = RngState::new(42, 1);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngState::new(1, 0);
        for _ in 0..1000 {
            let v = r.uniform();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = RngState::new(3, 0);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_int_covers_range() {
        let mut r = RngState::new(9, 2);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            seen[r.uniform_int(10) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
