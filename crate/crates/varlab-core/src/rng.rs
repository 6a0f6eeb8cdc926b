//! Seedable PRNG with a pinned algorithm so every run is reproducible
//! bit-for-bit: xoshiro256++ for the stream, splitmix64 to expand the seed.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use alloc::vec;

/// Name of the pinned generator, recorded in run artifacts.
pub const ALGORITHM: &str = "xoshiro256++/splitmix64";

/// One splitmix64 step: advances `state` and returns the next output.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256++ generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    s: [u64; 4],
}

impl Prng {
    /// Builds a generator whose state is the seed expanded through splitmix64.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Prng { s }
    }

    /// Derives an independent generator for substream `tag` of `seed`.
    ///
    /// Mixing the tag through splitmix64 before folding it into the seed keeps
    /// substreams decorrelated even for small consecutive tags.
    pub fn substream(seed: u64, tag: u64) -> Self {
        let mut sm = tag;
        Prng::new(seed ^ splitmix64(&mut sm))
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    /// Restores a generator from checkpointed state.
    pub fn from_state(s: [u64; 4]) -> Self {
        Prng { s }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in [0, n) by rejection sampling.
    pub fn next_bounded(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal draw via the Marsaglia polar method.
    ///
    /// No spare is cached across calls: each draw consumes candidate pairs
    /// until one lands inside the unit disc, so the stream position depends
    /// only on the accepted pairs.
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * libm::sqrt(-2.0 * libm::log(s) / s);
            }
        }
    }

    /// Fisher–Yates shuffle of `items` driven by this generator.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_bounded(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Tensor of independent draws from N(`mean`, `std`²).
///
/// Values are computed in f64 and converted once, so f32 tensors see the
/// rounded version of the exact same stream.
pub fn sample_gaussian<E: Element>(
    shape: &[usize],
    mean: f64,
    std: f64,
    prng: &mut Prng,
) -> Result<Tensor<E>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format_args!(
            "gaussian requires finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    let mut data = vec![E::ZERO; shape.iter().product()];
    fill_gaussian(&mut data, mean, std, prng);
    Tensor::from_vec(shape, data)
}

/// Fills `out` with draws from N(`mean`, `std`²).
pub fn fill_gaussian<E: Element>(out: &mut [E], mean: f64, std: f64, prng: &mut Prng) {
    for x in out.iter_mut() {
        *x = E::from_f64(mean + std * prng.next_gaussian());
    }
}

/// Tensor of independent draws from U(`lo`, `hi`), endpoints excluded for the
/// upper bound.
pub fn sample_uniform<E: Element>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    prng: &mut Prng,
) -> Result<Tensor<E>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format_args!(
            "uniform requires finite lo < hi, got lo={lo} hi={hi}"
        )));
    }
    let mut data = vec![E::ZERO; shape.iter().product()];
    fill_uniform(&mut data, lo, hi, prng);
    Tensor::from_vec(shape, data)
}

/// Fills `out` with draws from U(`lo`, `hi`).
///
/// The value is computed in f64; if conversion to `E` rounds onto `hi`, the
/// draw is nudged to the next representable value below so the upper bound
/// stays exclusive.
pub fn fill_uniform<E: Element>(out: &mut [E], lo: f64, hi: f64, prng: &mut Prng) {
    let span = hi - lo;
    for x in out.iter_mut() {
        let mut v = E::from_f64(lo + span * prng.next_f64());
        if v.to_f64() >= hi {
            v = v.next_down();
        }
        *x = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::moments;
    use alloc::vec::Vec;

    // Reference outputs generated with an independent implementation of
    // splitmix64 + xoshiro256++ (Python, arbitrary-precision ints masked to
    // 64 bits), frozen here.
    #[test]
    fn raw_stream_matches_reference_vectors() {
        let mut p = Prng::new(0);
        let got: Vec<u64> = (0..4).map(|_| p.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                0x53175D61490B23DF,
                0x61DA6F3DC380D507,
                0x5C0FDF91EC9A7BFC,
                0x02EEBF8C3BBE5E1A
            ]
        );

        let mut p = Prng::new(42);
        let got: Vec<u64> = (0..4).map(|_| p.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                0xD0764D4F4476689F,
                0x519E4174576F3791,
                0xFBE07CFB0C24ED8C,
                0xB37D9F600CD835B8
            ]
        );

        let mut p = Prng::new(0xDEADBEEF);
        let got: Vec<u64> = (0..4).map(|_| p.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                0x0C520EB8FEA98EDE,
                0x2B74A6338B80E0E2,
                0xBE238770C3795322,
                0x5F235F98A244EA97
            ]
        );
    }

    #[test]
    fn unit_floats_match_reference_vectors() {
        let mut p = Prng::new(7);
        let got: Vec<f64> = (0..3).map(|_| p.next_f64()).collect();
        assert_eq!(
            got,
            vec![
                0.05536043647833311,
                0.17211585444811772,
                0.7175761283586594
            ]
        );
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Prng::new(123);
        let mut b = Prng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut a = Prng::new(9);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = Prng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_from_each_other_and_base() {
        let mut base = Prng::new(5);
        let mut s0 = Prng::substream(5, 0);
        let mut s1 = Prng::substream(5, 1);
        let a: Vec<u64> = (0..8).map(|_| base.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| s0.next_u64()).collect();
        let c: Vec<u64> = (0..8).map(|_| s1.next_u64()).collect();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn gaussian_sample_moments_close() {
        let mut p = Prng::new(11);
        let t: Tensor<f64> = sample_gaussian(&[1 << 16], 0.5, 0.25, &mut p).unwrap();
        let (mean, std) = moments(&t).unwrap();
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        assert!((std - 0.25).abs() < 0.0025, "std {std}");
    }

    #[test]
    fn uniform_sample_moments_and_bounds() {
        let mut p = Prng::new(12);
        let t: Tensor<f32> = sample_uniform(&[1 << 16], -1.0, 1.0, &mut p).unwrap();
        for &x in t.data() {
            assert!(x > -1.0 && x < 1.0);
        }
        let (mean, std) = moments(&t).unwrap();
        // U(-1,1): mean 0, std 1/sqrt(3) = 0.5773...
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 0.5773502691896258).abs() < 0.005, "std {std}");
    }

    #[test]
    fn gaussian_rejects_negative_std() {
        let mut p = Prng::new(1);
        let r: Result<Tensor<f64>> = sample_gaussian(&[4], 0.0, -1.0, &mut p);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn uniform_rejects_inverted_bounds() {
        let mut p = Prng::new(1);
        let r: Result<Tensor<f64>> = sample_uniform(&[4], 1.0, -1.0, &mut p);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bounded_draws_cover_range_without_bias_smoke() {
        let mut p = Prng::new(3);
        let mut counts = [0u32; 5];
        for _ in 0..5000 {
            counts[p.next_bounded(5) as usize] += 1;
        }
        for &c in &counts {
            assert!(c > 800, "count {c}");
        }
    }
}
