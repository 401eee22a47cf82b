//! Seeded random streams: SplitMix64 seeding into xoshiro256++.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bijective 64-bit mix.
fn mix64(x: u64) -> u64 {
    let mut s = x;
    splitmix64(&mut s)
}

/// Derives a stream id from a label and a sequence of integers, e.g.
/// `stream_id("shuffle", &[fold, epoch])`.
pub fn stream_id(label: &str, parts: &[u64]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01B3);
    }
    for &p in parts {
        h = mix64(h ^ p);
    }
    h
}

/// A reproducible random stream keyed by `(seed, stream_id)`.
///
/// Identical keys give bit-identical sequences on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut sm = mix64(seed) ^ mix64(stream_id ^ 0x5EED_0F57_12EA_0001);
        let mut s = [0u64; 4];
        for w in &mut s {
            *w = splitmix64(&mut sm);
        }
        if s == [0; 4] {
            s[0] = GOLDEN;
        }
        RngStream {
            seed,
            stream_id,
            s,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream sharing this stream's seed.
    pub fn derive(&self, stream_id: u64) -> Self {
        RngStream::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let out = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1)`.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection, free of modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    /// Standard normal draw (Marsaglia polar method).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    /// Natural log of a Gamma(shape, 1) draw.
    ///
    /// Marsaglia–Tsang for `shape >= 1`; for `shape < 1` a Gamma(shape + 1)
    /// draw boosted by `u^(1/shape)`, kept in log space so tiny shapes do not
    /// underflow.
    fn ln_gamma_draw(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let base = self.ln_gamma_draw(shape + 1.0);
            return base + self.next_open01().ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_open01();
            if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return (d * v).ln();
            }
        }
    }

    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::Parameter(format!("gamma shape must be > 0, got {shape}")));
        }
        Ok(self.ln_gamma_draw(shape).exp())
    }

    /// One draw from Beta(alpha, alpha), strictly inside (0, 1).
    pub fn beta_symmetric(&mut self, alpha: f64) -> Result<f64> {
        self.beta(alpha, alpha)
    }

    /// One draw from Beta(a, b) as `X / (X + Y)` with Gamma draws X, Y.
    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        for (name, v) in [("a", a), ("b", b)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("beta parameter {name} must be > 0, got {v}")));
            }
        }
        let lx = self.ln_gamma_draw(a);
        let ly = self.ln_gamma_draw(b);
        // X / (X + Y) = 1 / (1 + exp(ln Y - ln X))
        let r = 1.0 / (1.0 + (ly - lx).exp());
        Ok(r.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    /// `k` distinct indices from `[0, m)` by partial Fisher–Yates, ascending.
    pub fn sample_subset(&mut self, m: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > m {
            return Err(Error::Parameter(format!(
                "subset size must be in 1..={m}, got {k}"
            )));
        }
        let mut pool: Vec<usize> = (0..m).collect();
        for i in 0..k {
            let j = i + self.below((m - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        Ok(pool)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// One draw from Beta(alpha, alpha).
pub fn sample_beta(rng: &mut RngStream, alpha: f64) -> Result<f64> {
    rng.beta_symmetric(alpha)
}

/// `k` distinct ascending indices drawn uniformly from `[0, m)`.
pub fn sample_subset(rng: &mut RngStream, m: usize, k: usize) -> Result<Vec<usize>> {
    rng.sample_subset(m, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn same_key_same_sequence() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(7, 3);
            (0..64).map(|_| r.next_u64()).collect()
        };
        let mut r = RngStream::new(7, 3);
        let b: Vec<u64> = (0..64).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
        let mut other = RngStream::new(7, 4);
        assert_ne!(a[0], other.next_u64());
    }

    #[test]
    fn reference_vectors() {
        let mut sm = 0u64;
        assert_eq!(splitmix64(&mut sm), 0xE220_A839_7B1D_CDAF);
        let mut r = RngStream::new(0, 0);
        r.s = [1, 2, 3, 4];
        // rotl(s0 + s3, 23) + s0
        assert_eq!(r.next_u64(), (5u64 << 23) + 1);
    }

    #[test]
    fn distinct_streams_look_independent() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| a.next_f64() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.next_f64() - 0.5).collect();
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        let corr = cov / (1.0 / 12.0);
        // 5 standard errors of a null correlation
        assert!(corr.abs() < 5.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut r = RngStream::new(1, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut r, 1.0).unwrap()).collect();
        let (mean, var) = moments(&xs);
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn beta_half_variance() {
        let mut r = RngStream::new(2, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut r, 0.5).unwrap()).collect();
        let (mean, var) = moments(&xs);
        let expected = 1.0 / (4.0 * (2.0 * 0.5 + 1.0));
        assert!((var - expected).abs() < 0.005, "var {var}");
        assert!((mean - 0.5).abs() < 0.005);
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut r = RngStream::new(3, 0);
        for shape in [0.3, 1.0, 4.5] {
            let xs: Vec<f64> = (0..50_000).map(|_| r.gamma(shape).unwrap()).collect();
            let (mean, var) = moments(&xs);
            assert!((mean - shape).abs() < 0.05 * shape.max(1.0), "shape {shape} mean {mean}");
            assert!((var - shape).abs() < 0.1 * shape.max(1.0), "shape {shape} var {var}");
        }
    }

    #[test]
    fn beta_rejects_nonpositive() {
        let mut r = RngStream::new(0, 0);
        assert!(matches!(sample_beta(&mut r, 0.0), Err(Error::Parameter(_))));
        assert!(sample_beta(&mut r, -1.0).is_err());
        assert!(sample_beta(&mut r, f64::NAN).is_err());
    }

    #[test]
    fn subset_full_and_single() {
        let mut r = RngStream::new(5, 0);
        assert_eq!(sample_subset(&mut r, 6, 6).unwrap(), (0..6).collect::<Vec<_>>());
        let one = sample_subset(&mut r, 10, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0] < 10);
        assert!(sample_subset(&mut r, 3, 4).is_err());
        assert!(sample_subset(&mut r, 3, 0).is_err());
    }

    #[test]
    fn subset_inclusion_is_uniform() {
        let mut r = RngStream::new(9, 0);
        let trials = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..trials {
            for i in sample_subset(&mut r, 10, 3).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.3).abs() < 0.01, "frequency {f}");
        }
    }

    proptest! {
        #[test]
        fn beta_strictly_inside(seed in any::<u64>(), alpha in 0.01f64..20.0) {
            let mut r = RngStream::new(seed, 0);
            for _ in 0..20 {
                let x = sample_beta(&mut r, alpha).unwrap();
                prop_assert!(x > 0.0 && x < 1.0);
            }
        }

        #[test]
        fn subset_is_distinct_sorted(seed in any::<u64>(), m in 1usize..200, frac in 0.0f64..1.0) {
            let k = ((m as f64 * frac) as usize).max(1);
            let mut r = RngStream::new(seed, 1);
            let s = sample_subset(&mut r, m, k).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&i| i < m));
        }
    }
}
