//! Subsampling, Slot-Mixup and their composition for one training step.

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::{MilModel, Bound};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Subsampling rate in (0, 1].
    pub p: f64,
    /// Symmetric Beta parameter for the mixing ratio.
    pub alpha: f64,
    /// Fraction of training after which mixing starts, in [0, 1).
    pub late_mix: f64,
    pub mixup_enabled: bool,
    pub sub_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::none()
    }
}

impl AugmentConfig {
    /// Plain training: no subsampling, no mixing.
    pub fn none() -> Self {
        AugmentConfig {
            p: 1.0,
            alpha: 1.0,
            late_mix: 0.0,
            mixup_enabled: false,
            sub_enabled: false,
        }
    }

    pub fn subsampling(p: f64) -> Self {
        AugmentConfig {
            p,
            sub_enabled: true,
            ..AugmentConfig::none()
        }
    }

    pub fn submix(p: f64, alpha: f64, late_mix: f64) -> Self {
        AugmentConfig {
            p,
            alpha,
            late_mix,
            mixup_enabled: true,
            sub_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.p)?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Parameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.late_mix) {
            return Err(Error::Parameter(format!(
                "late-mix fraction must be in [0, 1), got {}",
                self.late_mix
            )));
        }
        Ok(())
    }

    /// First epoch (0-based) at which mixing is applied.
    pub fn mix_start(&self, total_epochs: usize) -> usize {
        late_mix_start(self.late_mix, total_epochs)
    }

    pub fn mixes_at(&self, epoch: usize, total_epochs: usize) -> bool {
        self.mixup_enabled && epoch >= self.mix_start(total_epochs)
    }
}

fn check_rate(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("subsampling rate must be in (0, 1], got {p}")))
    }
}

/// `⌈L·E⌉`, tolerant of `L·E` landing a hair above an integer.
pub fn late_mix_start(late_mix: f64, total_epochs: usize) -> usize {
    (late_mix * total_epochs as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Patches kept out of `m`: `max(1, round(p·m))`, rounding halves up.
pub fn subsample_count(m: usize, p: f64) -> usize {
    ((p * m as f64 + 0.5).floor() as usize).clamp(1, m.max(1))
}

/// Keeps a uniformly random subset of `subsample_count(M, p)` patches in
/// their original order.
pub fn subsample(bag: &Bag, p: f64, rng: &mut RngStream) -> Result<Bag> {
    check_rate(p)?;
    let m = bag.num_instances();
    let k = subsample_count(m, p);
    if k == m {
        return Ok(bag.clone());
    }
    bag.select(&rng.sample_subset(m, k)?)
}

/// `(λ·S_i + (1−λ)·S_j, λ·y_i + (1−λ)·y_j)`.
pub fn slot_mixup<T: Scalar>(
    s_i: &Tensor<T>,
    y_i: &[T],
    s_j: &Tensor<T>,
    y_j: &[T],
    lambda: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    if s_i.shape() != s_j.shape() || y_i.len() != y_j.len() {
        return Err(Error::Dimension(format!(
            "slot_mixup: slots {:?} vs {:?}, labels {} vs {}",
            s_i.shape(),
            s_j.shape(),
            y_i.len(),
            y_j.len()
        )));
    }
    let mu = T::one() - lambda;
    let data = s_i.data().iter().zip(s_j.data()).map(|(&a, &b)| lambda * a + mu * b).collect();
    let y = y_i.iter().zip(y_j).map(|(&a, &b)| lambda * a + mu * b).collect();
    Ok((Tensor::new(s_i.shape().to_vec(), data)?, y))
}

pub fn one_hot<T: Scalar>(label: usize, num_classes: usize) -> Vec<T> {
    (0..num_classes).map(|c| if c == label { T::one() } else { T::zero() }).collect()
}

/// Result of one augmented forward pass.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub logits: Var,
    pub target: Vec<T>,
    /// Mixing ratio and partner index, when mixing happened.
    pub mix: Option<(f64, usize)>,
}

/// Records the augmented forward pass for `bag` on `tape`.
///
/// Random draws happen in a fixed order: subsample `bag`, pick the partner,
/// subsample the partner, draw λ. Without mixing only the first applies.
#[allow(clippy::too_many_arguments)]
pub fn submix_step<T: Scalar>(
    model: &MilModel<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    bag: &Bag,
    partner_pool: &[&Bag],
    cfg: &AugmentConfig,
    epoch: usize,
    total_epochs: usize,
    rng: &mut RngStream,
) -> Result<StepOutput<T>> {
    let c = model.config().num_classes;
    let view = |b: &Bag, rng: &mut RngStream| -> Result<Bag> {
        if cfg.sub_enabled {
            subsample(b, cfg.p, rng)
        } else {
            Ok(b.clone())
        }
    };
    let own = view(bag, rng)?;
    let x = model.embed(tape, bound, &own.features)?;
    let y_i = one_hot::<T>(bag.label, c);

    if !cfg.mixes_at(epoch, total_epochs) || model.pmas().is_none() {
        let f = model.forward(tape, bound, x)?;
        return Ok(StepOutput {
            logits: f.logits,
            target: y_i,
            mix: None,
        });
    }
    if partner_pool.is_empty() {
        return Err(Error::Parameter("mixup needs a nonempty partner pool".into()));
    }
    let (s_i, _) = model.slots(tape, bound, x)?;
    let j = rng.below(partner_pool.len() as u64) as usize;
    let partner = view(partner_pool[j], rng)?;
    let xj = model.embed(tape, bound, &partner.features)?;
    let (s_j, _) = model.slots(tape, bound, xj)?;
    let lambda = rng.beta_symmetric(cfg.alpha)?;
    let lam = T::of(lambda);
    let a = tape.scale(s_i, lam);
    let b = tape.scale(s_j, T::one() - lam);
    let mixed = tape.add(a, b)?;
    let logits = model.logits_from_slots(tape, bound, mixed)?;
    let y_j = one_hot::<T>(partner_pool[j].label, c);
    let target = y_i.iter().zip(&y_j).map(|(&a, &b)| lam * a + (T::one() - lam) * b).collect();
    Ok(StepOutput {
        logits,
        target,
        mix: Some((lambda, j)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(m: usize) -> Bag {
        let data = (0..m * 2).map(|v| v as f32).collect();
        Bag::new("b", Tensor::new(vec![m, 2], data).unwrap(), 1)
            .unwrap()
            .with_latent((0..m).map(|i| (i % 3 == 0) as u8).collect())
            .unwrap()
    }

    #[test]
    fn count_rule() {
        assert_eq!(subsample_count(10, 0.25), 3);
        assert_eq!(subsample_count(10, 0.05), 1);
        assert_eq!(subsample_count(200, 0.1), 20);
        assert_eq!(subsample_count(3, 0.5), 2);
        assert_eq!(subsample_count(7, 1.0), 7);
    }

    #[test]
    fn subsample_keeps_rows_and_latent() {
        let b = bag(10);
        let mut rng = RngStream::new(0, 0);
        let s = subsample(&b, 0.5, &mut rng).unwrap();
        assert_eq!(s.num_instances(), 5);
        let lat = s.latent_labels.as_ref().unwrap();
        for i in 0..5 {
            let row = s.features.row(i);
            let src = (row[0] / 2.0) as usize;
            assert_eq!(row, b.features.row(src));
            assert_eq!(lat[i], b.latent_labels.as_ref().unwrap()[src]);
            if i > 0 {
                assert!(s.features.row(i - 1)[0] < row[0]);
            }
        }
        assert_eq!(subsample(&b, 1.0, &mut rng).unwrap().features, b.features);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(subsample(&b, p, &mut rng), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn late_mix_gate() {
        assert_eq!(late_mix_start(0.2, 200), 40);
        assert_eq!(late_mix_start(0.1, 100), 10);
        assert_eq!(late_mix_start(0.0, 50), 0);
        assert_eq!(late_mix_start(0.25, 10), 3);
        let cfg = AugmentConfig::submix(0.5, 1.0, 0.2);
        assert!(!cfg.mixes_at(39, 200) && cfg.mixes_at(40, 200));
    }

    #[test]
    fn mixup_endpoints() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![-3.0, 0.5]]).unwrap();
        let (ya, yb) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(slot_mixup(&a, &ya, &b, &yb, 1.0).unwrap(), (a.clone(), ya.to_vec()));
        assert_eq!(slot_mixup(&a, &ya, &b, &yb, 0.0).unwrap(), (b.clone(), yb.to_vec()));
        assert_eq!(slot_mixup(&a, &ya, &b, &yb, 0.5).unwrap().1, vec![0.5, 0.5]);
        let c = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(slot_mixup(&a, &ya, &c, &yb, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::submix(0.4, 0.5, 0.2).validate().is_ok());
        assert!(AugmentConfig::submix(0.4, 0.0, 0.2).validate().is_err());
        assert!(AugmentConfig::submix(0.4, 0.5, 1.0).validate().is_err());
        assert!(AugmentConfig::subsampling(1.5).validate().is_err());
    }
}
