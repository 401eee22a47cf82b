//! Gaussian synthetic bags with latent instance labels.

use crate::data::{Bag, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};
use crate::tensor::Tensor;

/// Parameters of a synthetic binary MIL dataset.
///
/// Negative instances are `N(mu_neg, sigma² I)`, positive instances
/// `N(mu_pos, sigma² I)`. A positive bag holds a fraction `r ~ U[pos_frac]`
/// of positive instances, at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub m_range: (usize, usize),
    pub d_h: usize,
    pub mu_neg: Vec<f32>,
    pub mu_pos: Vec<f32>,
    pub sigma: f32,
    pub pos_frac: (f64, f64),
    /// Added to every instance of a test-split bag.
    pub shift_delta: Vec<f32>,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Means placed `separation · sigma` apart (Euclidean), with no test
    /// shift.
    ///
    /// The offset alternates in sign across coordinates (a trailing odd
    /// coordinate stays 0) so that it has zero feature mean and survives
    /// per-instance LayerNorm.
    pub fn separated(n_pos: usize, n_neg: usize, d_h: usize, separation: f32, seed: u64) -> Self {
        let paired = d_h - d_h % 2;
        let mu_pos = if paired == 0 {
            vec![separation; d_h]
        } else {
            let step = separation / (paired as f32).sqrt();
            (0..d_h)
                .map(|j| match j {
                    j if j >= paired => 0.0,
                    j if j % 2 == 0 => step,
                    _ => -step,
                })
                .collect()
        };
        SynthConfig {
            n_pos,
            n_neg,
            m_range: (50, 200),
            d_h,
            mu_neg: vec![0.0; d_h],
            mu_pos,
            sigma: 1.0,
            pos_frac: (0.05, 0.2),
            shift_delta: vec![0.0; d_h],
            valid_frac: 0.0,
            test_frac: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_pos + self.n_neg == 0 {
            return bad("no bags requested".into());
        }
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 {
            return bad(format!("instance range {:?} must satisfy 1 <= min <= max", self.m_range));
        }
        let (lo, hi) = self.pos_frac;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("positive fraction range {:?} must satisfy 0 < min <= max <= 1", self.pos_frac));
        }
        if self.d_h == 0 {
            return bad("feature dimension must be positive".into());
        }
        for (name, v) in [("mu_neg", &self.mu_neg), ("mu_pos", &self.mu_pos), ("shift_delta", &self.shift_delta)] {
            if v.len() != self.d_h {
                return bad(format!("{name} has length {} but d_h is {}", v.len(), self.d_h));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        let fracs_ok = (0.0..1.0).contains(&self.valid_frac)
            && (0.0..1.0).contains(&self.test_frac)
            && self.valid_frac + self.test_frac < 1.0;
        if !fracs_ok {
            return bad(format!(
                "valid/test fractions {} and {} must be in [0,1) and sum below 1",
                self.valid_frac, self.test_frac
            ));
        }
        Ok(())
    }
}

fn assign_splits(cfg: &SynthConfig, labels: &[usize]) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let mut rng = RngStream::new(cfg.seed, stream_id("synth-split", &[]));
    for class in [0usize, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let n_test = (cfg.test_frac * n).round() as usize;
        let n_valid = (cfg.valid_frac * n).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            if rank < n_test {
                splits[i] = Split::Test;
            } else if rank < n_test + n_valid {
                splits[i] = Split::Valid;
            }
        }
    }
    splits
}

/// Generates a dataset; identical configs give bit-identical datasets.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.n_pos + cfg.n_neg;
    let labels: Vec<usize> = (0..total).map(|i| usize::from(i < cfg.n_pos)).collect();
    let splits = assign_splits(cfg, &labels);
    let mut bags = Vec::with_capacity(total);
    for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let mut rng = RngStream::new(cfg.seed, stream_id("synth-bag", &[i as u64]));
        let m = rng.range_inclusive(cfg.m_range.0, cfg.m_range.1);
        let mut latent = vec![0u8; m];
        if label == 1 {
            let r = rng.uniform(cfg.pos_frac.0, cfg.pos_frac.1);
            let k = ((r * m as f64).round() as usize).clamp(1, m);
            for j in rng.sample_subset(m, k)? {
                latent[j] = 1;
            }
        }
        let mut data = Vec::with_capacity(m * cfg.d_h);
        for &y in &latent {
            let mu = if y == 1 { &cfg.mu_pos } else { &cfg.mu_neg };
            for (j, &c) in mu.iter().enumerate() {
                let mut v = c + cfg.sigma * rng.normal() as f32;
                if split == Split::Test {
                    v += cfg.shift_delta[j];
                }
                data.push(v);
            }
        }
        debug_assert_eq!(Bag::label_from_latent(&latent), label);
        let features = Tensor::new(vec![m, cfg.d_h], data)?;
        bags.push(Bag::new(format!("bag_{i:05}"), features, label)?.with_latent(latent)?);
    }
    Dataset::new(bags, splits, 2)
}
