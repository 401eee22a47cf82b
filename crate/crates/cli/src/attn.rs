use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use slotmil::data::{load_manifest, Bag, Dataset, Split};
use slotmil::metrics::{attention_entropy_top_k, ENTROPY_TOP_K};
use slotmil::model::{load_checkpoint, MilModel, ModelConfig};
use slotmil::Scalar;

use crate::{create_dir, manifest_path, write_file, CliError, CliResult, Precision, PrecisionArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SortArg {
    /// Patch order within each bag.
    Index,
    /// Highest score first within each bag.
    Score,
}

#[derive(Clone, Debug, Args)]
pub struct AttnArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// A checkpoint file, or a fold directory to also track entropy per epoch.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value = "index")]
    pub sort: SortArg,
    #[command(flatten)]
    pub precision: PrecisionArg,
}

/// `(epoch, path)` for every `ckpt_epochNNN.smc` in `dir`, by epoch.
pub fn list_checkpoints(dir: &Path) -> CliResult<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| CliError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name
            .strip_prefix("ckpt_epoch")
            .and_then(|r| r.strip_suffix(".smc"))
            .and_then(|e| e.parse().ok())
        {
            out.push((epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

fn split_bags(data: &Dataset, split: Split) -> Vec<&Bag> {
    data.indices(split).iter().map(|&i| &data.bags[i]).collect()
}

fn patch_scores<T: Scalar>(model: &MilModel<T>, bags: &[&Bag]) -> CliResult<Vec<Vec<f64>>> {
    bags.iter()
        .map(|b| Ok(model.predict(b)?.attention.patch_scores()))
        .collect()
}

fn mean_entropy(scores: &[Vec<f64>]) -> f64 {
    scores
        .iter()
        .map(|s| attention_entropy_top_k(s, ENTROPY_TOP_K))
        .sum::<f64>()
        / scores.len() as f64
}

/// Mean of the k-th largest score over bags that have at least k patches,
/// for k up to `ENTROPY_TOP_K`.
pub fn top_k_mean(scores: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let mut sums = vec![(0.0, 0usize); ENTROPY_TOP_K];
    for s in scores {
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (slot, v) in sums.iter_mut().zip(sorted) {
            slot.0 += v;
            slot.1 += 1;
        }
    }
    sums.into_iter()
        .filter(|s| s.1 > 0)
        .map(|(sum, n)| (sum / n as f64, n))
        .collect()
}

fn export<T: Scalar>(args: &AttnArgs) -> CliResult<()> {
    let (model_path, epochs) = if args.ckpt.is_dir() {
        let ckpts = list_checkpoints(&args.ckpt)?;
        let last = ckpts.last().cloned().ok_or_else(|| CliError::Io {
            path: args.ckpt.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoints"),
        })?;
        (last.1, Some(ckpts))
    } else {
        (args.ckpt.clone(), None)
    };
    let model: MilModel<T> = load_checkpoint(&model_path)?;
    let cfg: &ModelConfig = model.config();
    if !cfg.kind.has_attention() {
        return Err(CliError::Usage(format!("{} has no attention to export", cfg.kind)));
    }
    let data = load_manifest(&manifest_path(&args.data), cfg.num_classes)?;
    let bags = split_bags(&data, args.split);
    if bags.is_empty() {
        return Err(CliError::Usage(format!("the {} split is empty", args.split)));
    }
    let scores = patch_scores(&model, &bags)?;
    create_dir(&args.out)?;

    let with_latent = bags.iter().all(|b| b.latent_labels.is_some());
    let mut attn = String::from("bag_id,patch_index,score");
    attn.push_str(if with_latent { ",latent_label\n" } else { "\n" });
    let mut entropy = String::from("bag_id,label,num_patches,entropy_top100\n");
    for (bag, s) in bags.iter().zip(&scores) {
        let mut order: Vec<usize> = (0..s.len()).collect();
        if args.sort == SortArg::Score {
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        }
        for i in order {
            let _ = write!(attn, "{},{i},{}", bag.bag_id, s[i]);
            match &bag.latent_labels {
                Some(l) if with_latent => {
                    let _ = writeln!(attn, ",{}", l[i]);
                }
                _ => attn.push('\n'),
            }
        }
        let _ = writeln!(
            entropy,
            "{},{},{},{}",
            bag.bag_id,
            bag.label,
            s.len(),
            attention_entropy_top_k(s, ENTROPY_TOP_K)
        );
    }
    write_file(&args.out.join("attention.csv"), attn)?;
    write_file(&args.out.join("entropy.csv"), entropy)?;

    let mut top = String::from("rank,mean_score,bags\n");
    for (r, (m, n)) in top_k_mean(&scores).into_iter().enumerate() {
        let _ = writeln!(top, "{},{m},{n}", r + 1);
    }
    write_file(&args.out.join("top100_mean.csv"), top)?;

    if let Some(ckpts) = epochs {
        let mut by_epoch = String::from("epoch,entropy_top100\n");
        for (epoch, path) in ckpts {
            let m: MilModel<T> = load_checkpoint(&path)?;
            let _ = writeln!(by_epoch, "{epoch},{}", mean_entropy(&patch_scores(&m, &bags)?));
        }
        write_file(&args.out.join("entropy_by_epoch.csv"), by_epoch)?;
    }
    println!(
        "{} bags, mean top-{ENTROPY_TOP_K} entropy {:.4} bits",
        bags.len(),
        mean_entropy(&scores)
    );
    Ok(())
}

pub fn cmd_attn_export(args: &AttnArgs) -> CliResult<()> {
    match args.precision.precision {
        Precision::F32 => export::<f32>(args),
        Precision::F64 => export::<f64>(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_mean_counts_short_bags() {
        let got = top_k_mean(&[vec![0.5, 0.2, 0.3], vec![1.0]]);
        assert_eq!(got, vec![(0.75, 2), (0.3, 1), (0.2, 1)]);
    }
}
