use std::path::PathBuf;

use clap::{Args, ValueEnum};
use slotmil::data::{load_manifest, Bag, Dataset, Split};
use slotmil::metrics::{SplitMetrics, SplitPredictions};
use slotmil::model::{load_checkpoint, MilModel};
use slotmil::rng::{stream_id, RngStream};
use slotmil::train::{mc_inference, predict_split, McAverage};
use slotmil::Scalar;

use crate::{manifest_path, write_file, CliError, CliResult, Precision, PrecisionArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum McAverageArg {
    Probs,
    Logits,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Average predictions over K random subsamples of each bag.
    #[arg(long, value_name = "K", requires = "mc_p")]
    pub mc_k: Option<usize>,
    /// Subsampling rate for Monte-Carlo inference.
    #[arg(long, value_name = "P", requires = "mc_k", allow_negative_numbers = true)]
    pub mc_p: Option<f64>,
    #[arg(long, value_enum, default_value = "probs")]
    pub mc_average: McAverageArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub precision: PrecisionArg,
}

fn mc_predictions<T: Scalar>(
    model: &MilModel<T>,
    bags: &[&Bag],
    p: f64,
    k: usize,
    seed: u64,
    average: McAverage,
) -> CliResult<SplitPredictions> {
    let mut out = SplitPredictions::default();
    for (i, bag) in bags.iter().enumerate() {
        let mut rng = RngStream::new(seed, stream_id("mc", &[i as u64]));
        out.probs.push(mc_inference(model, bag, p, k, &mut rng, average)?);
        out.labels.push(bag.label);
    }
    Ok(out)
}

fn evaluate<T: Scalar>(args: &EvalArgs) -> CliResult<SplitMetrics> {
    let model: MilModel<T> = load_checkpoint(&args.ckpt)?;
    let data: Dataset = load_manifest(&manifest_path(&args.data), model.config().num_classes)?;
    let bags: Vec<&Bag> = data.indices(args.split).iter().map(|&i| &data.bags[i]).collect();
    if bags.is_empty() {
        return Err(CliError::Usage(format!("the {} split is empty", args.split)));
    }
    let preds = match (args.mc_k, args.mc_p) {
        (Some(k), Some(p)) => {
            if k == 0 {
                return Err(CliError::Usage("--mc-k must be at least 1".into()));
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(CliError::Usage(format!("--mc-p must be in (0, 1], got {p}")));
            }
            let average = match args.mc_average {
                McAverageArg::Probs => McAverage::Probabilities,
                McAverageArg::Logits => McAverage::Logits,
            };
            mc_predictions(&model, &bags, p, k, args.seed, average)?
        }
        _ => predict_split(&model, &bags)?,
    };
    Ok(preds.metrics()?)
}

/// Prints `split,acc,auc,nll,ece` for the checkpoint and returns the metrics.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<SplitMetrics> {
    let m = match args.precision.precision {
        Precision::F32 => evaluate::<f32>(args)?,
        Precision::F64 => evaluate::<f64>(args)?,
    };
    let text = format!(
        "split,acc,auc,nll,ece\n{},{},{},{},{}\n",
        args.split, m.acc, m.auc, m.nll, m.ece
    );
    print!("{text}");
    if let Some(out) = &args.out {
        write_file(out, text)?;
    }
    Ok(m)
}
