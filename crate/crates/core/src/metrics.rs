//! Bag-level classification metrics, attention entropy and checkpoint
//! selection.

use std::cmp::Ordering;
use std::fmt;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::tape::neg_log_prob;

pub const ECE_BINS: usize = 15;
pub const ENTROPY_TOP_K: usize = 100;
pub const TOP_CHECKPOINTS: usize = 10;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: {a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Contract(format!("{what}: no samples")));
    }
    Ok(())
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(preds.len(), labels.len(), "accuracy")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC of `scores` for the positive class `labels[i] == 1`,
/// ties counted as half a win.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    same_len(scores.len(), labels.len(), "auc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("auc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        n_pos += pos;
        n_neg += neg;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both positive and negative bags".into(),
        ));
    }
    Ok((2 * wins + ties) as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUC from class distributions: the positive-class column for two classes,
/// otherwise the mean one-vs-rest AUC over classes that are present and
/// absent somewhere in `labels`.
pub fn auc_from_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    same_len(probs.len(), labels.len(), "auc")?;
    let c = probs[0].len();
    let column = |k: usize| -> (Vec<f64>, Vec<usize>) {
        (
            probs.iter().map(|p| p[k]).collect(),
            labels.iter().map(|&l| (l == k) as usize).collect(),
        )
    };
    if c == 2 {
        let (s, l) = column(1);
        return auc(&s, &l);
    }
    let mut per_class = Vec::new();
    for k in 0..c {
        let (s, l) = column(k);
        match auc(&s, &l) {
            Ok(a) => per_class.push(a),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if per_class.len() < 2 {
        return Err(Error::UndefinedMetric(
            "one-vs-rest auc needs at least two classes present".into(),
        ));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mean of `−ln p(true class)` with probabilities floored at 1e-12.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    same_len(probs.len(), labels.len(), "nll")?;
    let total: f64 = probs.iter().zip(labels).map(|(p, &l)| neg_log_prob(p[l])).sum();
    Ok(total / labels.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins on
/// (0, 1], with confidence the largest class probability.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    same_len(probs.len(), labels.len(), "ece")?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (p, &l) in probs.iter().zip(labels) {
        let k = argmax(p);
        let c = p[k];
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        hits[b] += (k == l) as u8 as f64;
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// Base-2 entropy of the `k` largest scores after renormalizing them.
pub fn attention_entropy_top_k(scores: &[f64], k: usize) -> f64 {
    let mut top = scores.to_vec();
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(k);
    let z: f64 = top.iter().sum();
    if !(z > 0.0) {
        return 0.0;
    }
    -top.iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / z;
            p * p.log2()
        })
        .sum::<f64>()
}

/// The `n` epochs with the highest validation AUC, best first. Ties go to
/// the earlier epoch and NaN ranks last.
pub fn select_top_checkpoints(records: &[(usize, f64)], n: usize) -> Vec<usize> {
    let mut r = records.to_vec();
    r.sort_by(|a, b| {
        let by_auc = match (a.1.is_nan(), b.1.is_nan()) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => b.1.total_cmp(&a.1),
        };
        by_auc.then(a.0.cmp(&b.0))
    });
    r.into_iter().take(n).map(|(e, _)| e).collect()
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
    /// NaN when the split holds a single class.
    pub auc: f64,
    pub nll: f64,
    pub ece: f64,
    /// Mean top-100 attention entropy; `None` for models without attention.
    pub entropy_top100: Option<f64>,
}

/// Predictions for one split in bag order.
#[derive(Clone, Debug, Default)]
pub struct SplitPredictions {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Per-bag top-100 entropy, for models with attention.
    pub entropies: Option<Vec<f64>>,
}

/// Accuracy, AUC, NLL, ECE and mean entropy of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub acc: f64,
    pub auc: f64,
    pub nll: f64,
    pub ece: f64,
    pub entropy_top100: Option<f64>,
}

impl SplitPredictions {
    pub fn metrics(&self) -> Result<SplitMetrics> {
        let preds: Vec<usize> = self.probs.iter().map(|p| argmax(p)).collect();
        let auc = match auc_from_probs(&self.probs, &self.labels) {
            Ok(a) => a,
            Err(Error::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(SplitMetrics {
            acc: accuracy(&preds, &self.labels)?,
            auc,
            nll: nll(&self.probs, &self.labels)?,
            ece: ece(&self.probs, &self.labels, ECE_BINS)?,
            entropy_top100: self
                .entropies
                .as_ref()
                .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64),
        })
    }
}

impl MetricsRow {
    pub fn new(epoch: usize, split: Split, loss: f64, m: SplitMetrics) -> Self {
        MetricsRow {
            epoch,
            split,
            loss,
            acc: m.acc,
            auc: m.auc,
            nll: m.nll,
            ece: m.ece,
            entropy_top100: m.entropy_top100,
        }
    }

    pub const HEADER: &'static str = "epoch,split,loss,acc,auc,nll,ece,entropy_top100";
    pub const HEADER_NO_ENTROPY: &'static str = "epoch,split,loss,acc,auc,nll,ece";
}

/// CSV line without the trailing newline; the entropy column is present
/// only when the row has one.
impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.acc, self.auc, self.nll, self.ece
        )?;
        if let Some(e) = self.entropy_top100 {
            write!(f, ",{e}")?;
        }
        Ok(())
    }
}
