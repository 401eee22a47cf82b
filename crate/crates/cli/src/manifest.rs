use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Precision;

/// Every setting that affects a training run's numbers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub input_dim: usize,
    pub reduce_dim: Option<usize>,
    pub slots: usize,
    pub heads: usize,
    pub dim: usize,
    pub classes: usize,
    pub precision: Precision,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub restarts: usize,
    pub folds: usize,
    pub eval_train: bool,
    pub sub_enabled: bool,
    pub p: f64,
    pub mixup_enabled: bool,
    pub alpha: f64,
    pub late_mix: f64,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub data: String,
    pub out_dir: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: RunConfig, seed: u64, data: String, out_dir: String) -> Self {
        RunManifest {
            run_id: run_id(&config, seed),
            seed,
            data,
            out_dir,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// First 12 hex digits of SHA-256 over the config JSON and the seed. Paths
/// are left out so the same experiment gets the same id wherever it runs.
pub fn run_id(config: &RunConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(seed.to_le_bytes());
    h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RunConfig {
        RunConfig {
            model: "slot-mil".into(),
            input_dim: 8,
            reduce_dim: None,
            slots: 4,
            heads: 2,
            dim: 16,
            classes: 2,
            precision: Precision::F32,
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 10,
            restarts: 1,
            folds: 1,
            eval_train: true,
            sub_enabled: false,
            p: 1.0,
            mixup_enabled: false,
            alpha: 1.0,
            late_mix: 0.0,
        }
    }

    #[test]
    fn id_ignores_paths_but_not_settings() {
        let a = RunManifest::new(config(), 3, "d1".into(), "o1".into());
        let b = RunManifest::new(config(), 3, "d2".into(), "o2".into());
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(a.run_id.len(), 12);
        assert!(a.run_id.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(a.run_id, RunManifest::new(config(), 4, "d1".into(), "o1".into()).run_id);
        let c = RunConfig { lr: 2e-4, ..config() };
        assert_ne!(a.run_id, run_id(&c, 3));
    }

    #[test]
    fn json_round_trips_fields() {
        let m = RunManifest::new(config(), 3, "d".into(), "o".into());
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["config"]["precision"], "f32");
        assert_eq!(v["config"]["reduce_dim"], serde_json::Value::Null);
        assert_eq!(v["run_id"], m.run_id.as_str());
    }
}
