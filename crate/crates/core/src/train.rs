//! Loss, optimizer, learning-rate schedule, the epoch loop and Monte-Carlo
//! inference.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{submix_step, subsample, AugmentConfig};
use crate::data::{Bag, Dataset, Fold, Split};
use crate::error::{Error, Result};
use crate::metrics::{attention_entropy_top_k, MetricsRow, SplitPredictions, ENTROPY_TOP_K};
use crate::model::{save_checkpoint, MilModel};
use crate::rng::{stream_id, RngStream};
use crate::scalar::Scalar;
use crate::tape::{neg_log_prob, softmax_slice, Tape};
use crate::tensor::Tensor;

/// Optimizer, schedule and run settings. Architecture and augmentation are
/// configured separately by [`crate::model::ModelConfig`] and
/// [`AugmentConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Samples per bag for Monte-Carlo inference.
    pub mc_k: usize,
    /// Whether the train split is re-evaluated with full patches every
    /// epoch. When off, the train rows carry only the step loss.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 200,
            restarts: 5,
            seed: 0,
            mc_k: 1,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must be in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.restarts == 0 || self.epochs < self.restarts {
            return bad(format!(
                "need epochs >= restarts >= 1, got {} epochs and {} restarts",
                self.epochs, self.restarts
            ));
        }
        if self.mc_k == 0 {
            return bad("mc_k must be >= 1".into());
        }
        Ok(())
    }
}

/// `−Σ_c target_c · ln softmax(logits)_c`, with the probability floor shared
/// with [`crate::metrics::nll`].
pub fn cross_entropy<T: Scalar>(logits: &[T], target: &[T]) -> Result<T> {
    if logits.len() != target.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} logits against {} targets",
            logits.len(),
            target.len()
        )));
    }
    let total: T = target.iter().copied().sum();
    if (total - T::one()).abs() > T::of(1e-6) {
        return Err(Error::Contract(format!("target sums to {total}, not 1")));
    }
    let p = softmax_slice(logits);
    Ok(target.iter().zip(&p).map(|(&t, &q)| t * neg_log_prob(q)).sum())
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update with weight decay added to the gradient.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = T::of(1.0 - b1.powi(state.t as i32));
    let bc2 = T::of(1.0 - b2.powi(state.t as i32));
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one, wd, lr, eps) = (T::one(), T::of(cfg.weight_decay), T::of(lr_t), T::of(cfg.eps));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "adam_step: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (theta, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gr + wd * *theta;
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing to zero over `restarts` equal cycles of
/// `⌈epochs/restarts⌉` epochs, restarting at the base rate.
pub fn cosine_wr_lr(epoch: usize, base_lr: f64, epochs: usize, restarts: usize) -> f64 {
    let cycle = epochs.div_ceil(restarts.max(1)).max(1);
    let t = (epoch % cycle) as f64;
    0.5 * base_lr * (1.0 + (PI * t / cycle as f64).cos())
}

/// Bag indices for one training run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSplits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl RunSplits {
    /// The dataset's own train/valid/test assignment.
    pub fn from_dataset(d: &Dataset) -> Self {
        RunSplits {
            train: d.indices(Split::Train),
            valid: d.indices(Split::Valid),
            test: d.indices(Split::Test),
        }
    }

    /// A cross-validation fold, tested on the dataset's test split.
    pub fn from_fold(d: &Dataset, fold: &Fold) -> Self {
        RunSplits {
            train: fold.train.clone(),
            valid: fold.valid.clone(),
            test: d.indices(Split::Test),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Everything `fit` records.
#[derive(Clone, Debug, Default)]
pub struct History {
    /// Train, valid and test rows for every epoch, in that order.
    pub rows: Vec<MetricsRow>,
    /// Optimization steps taken.
    pub steps: usize,
}

impl History {
    pub fn valid_auc(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == Split::Valid)
            .map(|r| (r.epoch, r.auc))
            .collect()
    }

    pub fn row(&self, epoch: usize, split: Split) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.split == split)
    }

    /// The metrics log as CSV, header included.
    pub fn to_csv(&self, with_entropy: bool) -> String {
        let mut out = String::new();
        out.push_str(if with_entropy { MetricsRow::HEADER } else { MetricsRow::HEADER_NO_ENTROPY });
        out.push('\n');
        for r in &self.rows {
            let r = MetricsRow {
                entropy_top100: if with_entropy { Some(r.entropy_top100.unwrap_or(f64::NAN)) } else { None },
                ..r.clone()
            };
            let _ = writeln!(out, "{r}");
        }
        out
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:03}.smc")
}

pub const CHECKPOINT_INDEX: &str = "checkpoints.csv";

/// Full-patch predictions for the given bags, with per-bag top-100 entropy
/// when the model has attention.
pub fn predict_split<T: Scalar>(model: &MilModel<T>, bags: &[&Bag]) -> Result<SplitPredictions> {
    let with_attention = model.kind().has_attention();
    let mut out = SplitPredictions {
        entropies: with_attention.then(Vec::new),
        ..Default::default()
    };
    for bag in bags {
        let p = model.predict(bag)?;
        out.probs.push(p.probabilities());
        out.labels.push(bag.label);
        if let Some(e) = out.entropies.as_mut() {
            e.push(attention_entropy_top_k(&p.attention.patch_scores(), ENTROPY_TOP_K));
        }
    }
    Ok(out)
}

fn stream(cfg: &TrainConfig, label: &str, parts: &[u64]) -> RngStream {
    RngStream::new(cfg.seed, stream_id(label, parts))
}

/// Trains `model` one bag per step on `splits.train` for `cfg.epochs` epochs
/// and evaluates every split with full patches after each epoch.
///
/// With `out_dir`, each epoch's weights are saved as
/// `ckpt_epochNNN.smc` and indexed with their validation AUC in
/// `checkpoints.csv`.
pub fn fit<T: Scalar>(
    model: &mut MilModel<T>,
    data: &Dataset,
    splits: &RunSplits,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    out_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    aug.validate()?;
    if (aug.mixup_enabled) && model.pmas().is_none() {
        return Err(Error::Parameter(format!("mixup needs slots; {} has none", model.kind())));
    }
    for split in Split::ALL {
        if splits.get(split).is_empty() {
            return Err(Error::Parameter(format!("empty {split} split")));
        }
    }
    let pool: Vec<&Bag> = splits.train.iter().map(|&i| &data.bags[i]).collect();
    let mut state = AdamState::new(model.params().tensors());
    let mut history = History::default();
    let mut index = String::from("epoch,valid_auc\n");
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        let lr_t = cosine_wr_lr(epoch, cfg.lr, cfg.epochs, cfg.restarts);
        let mut order = splits.train.clone();
        stream(cfg, "epoch-order", &[epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &data.bags[i];
            let mut rng = stream(cfg, "augment", &[epoch as u64, i as u64]);
            tape.clear();
            let bound = model.bind(&mut tape);
            let step = submix_step(model, &mut tape, &bound, bag, &pool, aug, epoch, cfg.epochs, &mut rng)?;
            let loss = tape.softmax_xent(step.logits, &step.target)?;
            let lv = tape.value(loss).item()?.to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, bag {}", bag.bag_id)));
            }
            loss_sum += lv;
            let grads = tape.grad(loss, bound.vars())?;
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state, lr_t, cfg)?;
            history.steps += 1;
        }
        let train_loss = loss_sum / order.len() as f64;

        for split in Split::ALL {
            let bags: Vec<&Bag> = splits.get(split).iter().map(|&i| &data.bags[i]).collect();
            let row = if split == Split::Train && !cfg.eval_train {
                MetricsRow {
                    epoch,
                    split,
                    loss: train_loss,
                    acc: f64::NAN,
                    auc: f64::NAN,
                    nll: f64::NAN,
                    ece: f64::NAN,
                    entropy_top100: model.kind().has_attention().then_some(f64::NAN),
                }
            } else {
                let m = predict_split(model, &bags)?.metrics()?;
                let loss = if split == Split::Train { train_loss } else { m.nll };
                MetricsRow::new(epoch, split, loss, m)
            };
            if split == Split::Valid {
                let _ = writeln!(index, "{epoch},{}", row.auc);
            }
            history.rows.push(row);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(model, &dir.join(checkpoint_name(epoch)))?;
        }
    }
    if let Some(dir) = out_dir {
        let path: PathBuf = dir.join(CHECKPOINT_INDEX);
        fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    }
    Ok(history)
}

/// How Monte-Carlo samples are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum McAverage {
    #[default]
    Probabilities,
    /// Average logits, then apply softmax once.
    Logits,
}

/// Mean prediction over `k` random subsamples of `bag` at rate `p`.
pub fn mc_inference<T: Scalar>(
    model: &MilModel<T>,
    bag: &Bag,
    p: f64,
    k: usize,
    rng: &mut RngStream,
    average: McAverage,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Parameter("MC inference needs k >= 1".into()));
    }
    let c = model.config().num_classes;
    let mut acc = vec![0.0; c];
    for _ in 0..k {
        let view = subsample(bag, p, rng)?;
        let pred = model.predict(&view)?;
        let sample = match average {
            McAverage::Probabilities => pred.probabilities(),
            McAverage::Logits => pred.logits.data().iter().map(|v| v.to_f64_lossy()).collect(),
        };
        acc.iter_mut().zip(sample).for_each(|(a, s)| *a += s);
    }
    acc.iter_mut().for_each(|a| *a /= k as f64);
    Ok(match average {
        McAverage::Probabilities => acc,
        McAverage::Logits => softmax_slice(&acc),
    })
}
