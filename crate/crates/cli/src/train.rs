use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use slotmil::augment::AugmentConfig;
use slotmil::data::{load_manifest, stratified_kfold, Dataset, Split};
use slotmil::metrics::{select_top_checkpoints, TOP_CHECKPOINTS};
use slotmil::model::{MilModel, ModelConfig, ModelKind};
use slotmil::rng::{stream_id, RngStream};
use slotmil::train::{fit, History, RunSplits, TrainConfig};
use slotmil::Scalar;

use crate::manifest::{RunConfig, RunManifest};
use crate::{create_dir, manifest_path, write_file, CliError, CliResult, Precision, PrecisionArg, THREADS_ENV};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    #[value(name = "slot-mil")]
    SlotMil,
    #[value(name = "meanpool")]
    MeanPool,
    #[value(name = "maxpool")]
    MaxPool,
    #[value(name = "abmil")]
    Abmil,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::SlotMil => ModelKind::SlotMil,
            ModelArg::MeanPool => ModelKind::MeanPool,
            ModelArg::MaxPool => ModelKind::MaxPool,
            ModelArg::Abmil => ModelKind::Abmil,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "slot-mil")]
    pub model: ModelArg,
    #[arg(long, default_value_t = 16)]
    pub slots: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Hidden width.
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    /// Project instance features to this width first.
    #[arg(long)]
    pub reduce_dim: Option<usize>,
    /// Train on a random fraction of each bag's patches.
    #[arg(long, value_name = "P", allow_negative_numbers = true)]
    pub sub: Option<f64>,
    /// Enable slot mixup with Beta(alpha, alpha) mixing ratios.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Fraction of training before mixing starts.
    #[arg(long, value_name = "L", allow_negative_numbers = true)]
    pub latemix: Option<f64>,
    /// 1 uses the dataset's splits; k >= 2 cross-validates over train+valid.
    #[arg(long, default_value_t = 1)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub weight_decay: f64,
    /// Cosine annealing cycles.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[command(flatten)]
    pub precision: PrecisionArg,
    /// Log only the step loss for the train split.
    #[arg(long)]
    pub skip_train_eval: bool,
}

fn usage<T>(msg: String) -> CliResult<T> {
    Err(CliError::Usage(msg))
}

impl TrainArgs {
    pub fn augment(&self) -> CliResult<AugmentConfig> {
        let mut aug = AugmentConfig::none();
        if let Some(p) = self.sub {
            if !(p > 0.0 && p <= 1.0) {
                return usage(format!("--sub must be in (0, 1], got {p}"));
            }
            aug.p = p;
            aug.sub_enabled = true;
        }
        if let Some(l) = self.latemix {
            if self.alpha.is_none() {
                return usage("--latemix needs --alpha".into());
            }
            if !(0.0..1.0).contains(&l) {
                return usage(format!("--latemix must be in [0, 1), got {l}"));
            }
            aug.late_mix = l;
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return usage(format!("--alpha must be > 0, got {a}"));
            }
            if self.model != ModelArg::SlotMil {
                return usage(format!(
                    "--alpha needs slots; {} has none",
                    ModelKind::from(self.model)
                ));
            }
            aug.alpha = a;
            aug.mixup_enabled = true;
        }
        Ok(aug)
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        let kind = ModelKind::from(self.model);
        let mut c = match kind {
            ModelKind::SlotMil => ModelConfig::slot_mil(self.slots, self.heads, self.dim, input_dim, self.classes),
            k => ModelConfig::baseline(k, self.dim, input_dim, self.classes),
        };
        c.reduce_dim = self.reduce_dim;
        c
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            restarts: self.restarts,
            seed,
            eval_train: !self.skip_train_eval,
            ..TrainConfig::default()
        }
    }

    fn run_config(&self, model: &ModelConfig, aug: &AugmentConfig) -> RunConfig {
        let t = self.train_config(self.seed);
        RunConfig {
            model: model.kind.as_str().into(),
            input_dim: model.input_dim,
            reduce_dim: model.reduce_dim,
            slots: model.slots,
            heads: model.heads,
            dim: model.dim,
            classes: model.num_classes,
            precision: self.precision.precision,
            lr: t.lr,
            weight_decay: t.weight_decay,
            betas: [t.betas.0, t.betas.1],
            adam_eps: t.eps,
            epochs: t.epochs,
            restarts: t.restarts,
            folds: self.folds,
            eval_train: t.eval_train,
            sub_enabled: aug.sub_enabled,
            p: aug.p,
            mixup_enabled: aug.mixup_enabled,
            alpha: aug.alpha,
            late_mix: aug.late_mix,
        }
    }
}

/// Test metrics of one fold, averaged over its best validation epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub fold: usize,
    pub epochs: Vec<usize>,
    pub acc: f64,
    pub auc: f64,
    pub nll: f64,
    pub ece: f64,
    pub entropy_top100: Option<f64>,
}

impl FoldSummary {
    fn values(&self) -> Vec<f64> {
        let mut v = vec![self.acc, self.auc, self.nll, self.ece];
        v.extend(self.entropy_top100);
        v
    }
}

/// Averages the test rows of the `TOP_CHECKPOINTS` epochs with the highest
/// validation AUC.
pub fn summarize_fold(fold: usize, history: &History) -> FoldSummary {
    let epochs = select_top_checkpoints(&history.valid_auc(), TOP_CHECKPOINTS);
    let rows: Vec<_> = epochs
        .iter()
        .filter_map(|&e| history.row(e, Split::Test))
        .collect();
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&slotmil::metrics::MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    FoldSummary {
        fold,
        acc: mean(&|r| r.acc),
        auc: mean(&|r| r.auc),
        nll: mean(&|r| r.nll),
        ece: mean(&|r| r.ece),
        entropy_top100: rows
            .first()
            .and_then(|r| r.entropy_top100)
            .map(|_| mean(&|r| r.entropy_top100.unwrap_or(f64::NAN))),
        epochs,
    }
}

/// Mean and sample standard deviation (NaN for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, if xs.len() > 1 { var.sqrt() } else { f64::NAN })
}

/// `summary.csv`: one row per fold, then `mean` and `std` rows.
pub fn summary_csv(folds: &[FoldSummary]) -> String {
    let with_entropy = folds.first().is_some_and(|f| f.entropy_top100.is_some());
    let mut out = String::from("fold,acc,auc,nll,ece");
    if with_entropy {
        out.push_str(",entropy_top100");
    }
    out.push('\n');
    let line = |label: &str, vals: &[f64]| {
        let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        format!("{label},{}\n", cells.join(","))
    };
    for f in folds {
        out.push_str(&line(&f.fold.to_string(), &f.values()));
    }
    let cols = folds.first().map_or(0, |f| f.values().len());
    let stats: Vec<(f64, f64)> = (0..cols)
        .map(|c| mean_std(&folds.iter().map(|f| f.values()[c]).collect::<Vec<_>>()))
        .collect();
    out.push_str(&line("mean", &stats.iter().map(|s| s.0).collect::<Vec<_>>()));
    out.push_str(&line("std", &stats.iter().map(|s| s.1).collect::<Vec<_>>()));
    out
}

fn summary_table(folds: &[FoldSummary]) -> String {
    let mut names = vec!["ACC", "AUC", "NLL", "ECE"];
    if folds.first().is_some_and(|f| f.entropy_top100.is_some()) {
        names.push("H@100");
    }
    let mut out = String::new();
    for (c, name) in names.iter().enumerate() {
        let (m, s) = mean_std(&folds.iter().map(|f| f.values()[c]).collect::<Vec<_>>());
        let _ = writeln!(out, "{name:<6} {m:.4} ± {s:.4}");
    }
    out
}

/// Seed for fold `k`, used both for weight init and for the training streams.
pub fn fold_seed(seed: u64, k: usize) -> u64 {
    RngStream::new(seed, stream_id("fold", &[k as u64])).next_u64()
}

fn thread_count(folds: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(folds).max(1)
}

struct FoldJob<'a> {
    k: usize,
    splits: RunSplits,
    dir: PathBuf,
    data: &'a Dataset,
}

fn run_fold<T: Scalar>(
    job: &FoldJob<'_>,
    args: &TrainArgs,
    model_cfg: &ModelConfig,
    aug: &AugmentConfig,
) -> CliResult<FoldSummary> {
    create_dir(&job.dir)?;
    let seed = fold_seed(args.seed, job.k);
    let mut model = MilModel::<T>::new(model_cfg.clone(), seed)?;
    let cfg = args.train_config(seed);
    let history = fit(&mut model, job.data, &job.splits, &cfg, aug, Some(&job.dir))?;
    write_file(
        &job.dir.join("metrics.csv"),
        history.to_csv(model_cfg.kind.has_attention()),
    )?;
    Ok(summarize_fold(job.k, &history))
}

/// Trains every fold and writes `run.json`, per-fold logs and checkpoints,
/// and `summary.csv`. Returns the per-fold summaries.
pub fn cmd_train(args: &TrainArgs) -> CliResult<Vec<FoldSummary>> {
    let aug = args.augment()?;
    if args.folds == 0 {
        return usage("--folds must be at least 1".into());
    }
    let data = load_manifest(&manifest_path(&args.data), args.classes)?;
    let model_cfg = args.model_config(data.feature_dim);
    model_cfg.validate()?;
    args.train_config(args.seed).validate()?;

    let splits: Vec<RunSplits> = if args.folds == 1 {
        vec![RunSplits::from_dataset(&data)]
    } else {
        stratified_kfold(&data, args.folds, args.seed)?
            .iter()
            .map(|f| RunSplits::from_fold(&data, f))
            .collect()
    };

    create_dir(&args.out)?;
    let manifest = RunManifest::new(
        args.run_config(&model_cfg, &aug),
        args.seed,
        args.data.display().to_string(),
        args.out.display().to_string(),
    );
    write_file(&args.out.join("run.json"), manifest.to_json())?;

    let jobs: Vec<FoldJob<'_>> = splits
        .into_iter()
        .enumerate()
        .map(|(k, splits)| FoldJob {
            k,
            splits,
            dir: args.out.join(format!("fold{k}")),
            data: &data,
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(jobs.len()))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let results: Vec<CliResult<FoldSummary>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| match args.precision.precision {
                Precision::F32 => run_fold::<f32>(job, args, &model_cfg, &aug),
                Precision::F64 => run_fold::<f64>(job, args, &model_cfg, &aug),
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    write_file(&args.out.join("summary.csv"), summary_csv(&summaries))?;
    println!("run {} ({} fold(s))", manifest.run_id, summaries.len());
    print!("{}", summary_table(&summaries));
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use slotmil::metrics::MetricsRow;

    fn row(epoch: usize, split: Split, auc: f64, acc: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            split,
            loss: 0.0,
            acc,
            auc,
            nll: 0.0,
            ece: 0.0,
            entropy_top100: None,
        }
    }

    #[test]
    fn summary_uses_best_valid_epochs() {
        let mut h = History::default();
        for e in 0..12 {
            // valid AUC peaks at the last epochs; test acc records the epoch
            h.rows.push(row(e, Split::Valid, e as f64 / 12.0, 0.0));
            h.rows.push(row(e, Split::Test, 0.5, e as f64));
        }
        let s = summarize_fold(0, &h);
        assert_eq!(s.epochs, (2..12).rev().collect::<Vec<_>>());
        assert_eq!(s.acc, (2..12).sum::<usize>() as f64 / 10.0);
        assert_eq!(s.entropy_top100, None);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[0.7]).1.is_nan());
    }

    #[test]
    fn fold_seeds_differ() {
        assert_ne!(fold_seed(0, 0), fold_seed(0, 1));
        assert_eq!(fold_seed(5, 2), fold_seed(5, 2));
    }
}
