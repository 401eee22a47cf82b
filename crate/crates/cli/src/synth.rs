use std::path::PathBuf;

use clap::Args;
use slotmil::data::{synth_dataset, write_dataset, SynthConfig};

use crate::{create_dir, CliError, CliResult};

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 100)]
    pub n_neg: usize,
    /// Fewest instances per bag.
    #[arg(long, default_value_t = 50)]
    pub m_min: usize,
    /// Most instances per bag.
    #[arg(long, default_value_t = 200)]
    pub m_max: usize,
    /// Instance feature width.
    #[arg(long, default_value_t = 32)]
    pub d_h: usize,
    /// Distance between class means in units of sigma.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f32,
    /// Range of the positive-instance fraction in positive bags.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.05, 0.2])]
    pub pos_frac: Vec<f64>,
    /// Constant added to every feature of test-split bags.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub shift: f32,
    #[arg(long, default_value_t = 0.2)]
    pub valid_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn config(&self) -> CliResult<SynthConfig> {
        let mut cfg = SynthConfig::separated(self.n_pos, self.n_neg, self.d_h, self.separation, self.seed);
        cfg.m_range = (self.m_min, self.m_max);
        cfg.pos_frac = (self.pos_frac[0], self.pos_frac[1]);
        cfg.shift_delta = vec![self.shift; self.d_h];
        cfg.valid_frac = self.valid_frac;
        cfg.test_frac = self.test_frac;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Writes the dataset and returns the manifest path.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<PathBuf> {
    let cfg = args.config()?;
    let data = synth_dataset(&cfg)?;
    create_dir(&args.out)?;
    let manifest = write_dataset(&data, &args.out)?;
    println!("wrote {} bags to {}", data.len(), manifest.display());
    Ok(manifest)
}
