//! Slot-MIL and the pooling baselines.
//!
//! Every architecture stores its weights in one [`ParamSet`] and describes
//! how to use them with [`ParamId`] layouts, so optimizers and checkpoints
//! can treat all models alike.

mod attention;
mod checkpoint;
mod params;
mod pma;

use std::fmt;
use std::str::FromStr;

pub use attention::{patch_attention, AttentionMap, HeadAttention};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC};
pub use params::{Bound, ParamId, ParamSet};
pub use pma::{HeadIds, HeadNorm, HeadVars, LayerNormIds, LinearIds, MlpIds, Pma, PmaSpec, LN_EPS, QUERY_NORM_EPS};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::rng::{stream_id, RngStream};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    SlotMil,
    MeanPool,
    MaxPool,
    Abmil,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SlotMil => "slot-mil",
            ModelKind::MeanPool => "meanpool",
            ModelKind::MaxPool => "maxpool",
            ModelKind::Abmil => "abmil",
        }
    }

    fn code(self) -> u32 {
        match self {
            ModelKind::SlotMil => 0,
            ModelKind::MeanPool => 1,
            ModelKind::MaxPool => 2,
            ModelKind::Abmil => 3,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => ModelKind::SlotMil,
            1 => ModelKind::MeanPool,
            2 => ModelKind::MaxPool,
            3 => ModelKind::Abmil,
            _ => return Err(Error::Format(format!("unknown model code {c}"))),
        })
    }

    /// Whether the model produces per-patch attention.
    pub fn has_attention(self) -> bool {
        matches!(self, ModelKind::SlotMil | ModelKind::Abmil)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot-mil" | "slotmil" => Ok(ModelKind::SlotMil),
            "meanpool" => Ok(ModelKind::MeanPool),
            "maxpool" => Ok(ModelKind::MaxPool),
            "abmil" => Ok(ModelKind::Abmil),
            other => Err(Error::Parameter(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Raw instance feature width.
    pub input_dim: usize,
    /// Width after the optional linear reduction layer.
    pub reduce_dim: Option<usize>,
    /// Number of slots `S`.
    pub slots: usize,
    pub heads: usize,
    /// Hidden width `d`; also the gated-attention width for ABMIL.
    pub dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn slot_mil(slots: usize, heads: usize, dim: usize, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::SlotMil,
            input_dim,
            reduce_dim: None,
            slots,
            heads,
            dim,
            num_classes,
        }
    }

    pub fn baseline(kind: ModelKind, dim: usize, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind,
            input_dim,
            reduce_dim: None,
            slots: 1,
            heads: 1,
            dim,
            num_classes,
        }
    }

    /// Instance width seen by the aggregator.
    pub fn feature_dim(&self) -> usize {
        self.reduce_dim.unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let min1 = [
            ("slots", self.slots),
            ("heads", self.heads),
            ("dim", self.dim),
            ("input_dim", self.input_dim),
            ("reduce_dim", self.reduce_dim.unwrap_or(1)),
        ];
        for (name, v) in min1 {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Arch {
    SlotMil { pma_f: Pma, pma_g: Pma },
    Pool { classifier: LinearIds },
    Abmil {
        att_v: LinearIds,
        att_u: LinearIds,
        att_w: LinearIds,
        classifier: LinearIds,
    },
}

/// A bag classifier: its configuration, weights and weight layout.
#[derive(Clone, Debug)]
pub struct MilModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    reduce: Option<LinearIds>,
    arch: Arch,
}

/// Tape variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Length-`C` logits.
    pub logits: Var,
    /// `S × d` slots (Slot-MIL only).
    pub slots: Option<Var>,
    /// Attention over patches: the slot-producing PMA's heads for Slot-MIL,
    /// one `1 × M` key head for ABMIL, none for pooling baselines.
    pub attention: Vec<HeadVars>,
}

/// Values from one forward pass, detached from the tape.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub slots: Option<Tensor<T>>,
    pub attention: AttentionMap,
}

impl<T: Scalar> Prediction<T> {
    /// Class probabilities in `f64`.
    pub fn probabilities(&self) -> Vec<f64> {
        let l: Vec<f64> = self.logits.data().iter().map(|v| v.to_f64_lossy()).collect();
        crate::tape::softmax_slice(&l)
    }
}

impl<T: Scalar> MilModel<T> {
    /// Builds a model with weights `N(0, 1/fan_in)` (standard deviation
    /// `1/√fan_in`), inducing points `N(0, 1/d_i)`, unit LayerNorm gains and
    /// zero biases. Deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, stream_id("init", &[]));
        let mut ps = ParamSet::new();
        let d_h = config.feature_dim();
        let reduce = config
            .reduce_dim
            .map(|r| LinearIds::new(&mut ps, "reduce", config.input_dim, r, true, &mut rng));
        let c = config.num_classes;
        let arch = match config.kind {
            ModelKind::SlotMil => {
                let pma_f = Pma::new(
                    &mut ps,
                    "pma_f",
                    PmaSpec {
                        num_points: config.slots,
                        input_dim: d_h,
                        dim: config.dim,
                        heads: config.heads,
                        value_dim: config.dim / config.heads,
                        residual: true,
                    },
                    &mut rng,
                )?;
                let pma_g = Pma::new(
                    &mut ps,
                    "pma_g",
                    PmaSpec {
                        num_points: c,
                        input_dim: config.dim,
                        dim: config.dim,
                        heads: 1,
                        value_dim: 1,
                        residual: false,
                    },
                    &mut rng,
                )?;
                Arch::SlotMil { pma_f, pma_g }
            }
            ModelKind::MeanPool | ModelKind::MaxPool => Arch::Pool {
                classifier: LinearIds::new(&mut ps, "classifier", d_h, c, true, &mut rng),
            },
            ModelKind::Abmil => Arch::Abmil {
                att_v: LinearIds::new(&mut ps, "abmil.att_v", d_h, config.dim, true, &mut rng),
                att_u: LinearIds::new(&mut ps, "abmil.att_u", d_h, config.dim, true, &mut rng),
                att_w: LinearIds::new(&mut ps, "abmil.att_w", config.dim, 1, true, &mut rng),
                classifier: LinearIds::new(&mut ps, "classifier", d_h, c, true, &mut rng),
            },
        };
        Ok(MilModel {
            config,
            params: ps,
            reduce,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// The slot-producing and logit-producing PMA layouts.
    pub fn pmas(&self) -> Option<(&Pma, &Pma)> {
        match &self.arch {
            Arch::SlotMil { pma_f, pma_g } => Some((pma_f, pma_g)),
            _ => None,
        }
    }

    /// Same architecture with weights converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> MilModel<U> {
        MilModel {
            config: self.config.clone(),
            params: self.params.cast(),
            reduce: self.reduce,
            arch: self.arch.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    /// Records the bag's features and applies the reduction layer.
    pub fn embed(&self, tape: &mut Tape<T>, b: &Bound, features: &Tensor<f32>) -> Result<Var> {
        let (_, width) = features.dims2()?;
        if width != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} features per instance, bag has {width}",
                self.config.input_dim
            )));
        }
        if !features.all_finite() {
            return Err(Error::Numeric("non-finite bag features".into()));
        }
        let x = tape.constant(features.cast());
        match &self.reduce {
            Some(r) => r.apply(tape, b, x),
            None => Ok(x),
        }
    }

    /// Slot-MIL: pools embedded instances into `S × d` slots.
    pub fn slots(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<(Var, Vec<HeadVars>)> {
        let (pma_f, _) = self.slot_pmas()?;
        pma_f.forward(tape, b, x)
    }

    /// Slot-MIL: reduces slots to `C` logits with the single-value PMA.
    pub fn logits_from_slots(&self, tape: &mut Tape<T>, b: &Bound, slots: Var) -> Result<Var> {
        let (_, pma_g) = self.slot_pmas()?;
        let (out, _) = pma_g.forward(tape, b, slots)?;
        tape.reshape(out, vec![self.config.num_classes])
    }

    fn slot_pmas(&self) -> Result<(&Pma, &Pma)> {
        self.pmas().ok_or_else(|| {
            Error::Parameter(format!("{} has no slots", self.config.kind))
        })
    }

    /// Full forward pass over an embedded bag.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Forward> {
        let c = self.config.num_classes;
        match &self.arch {
            Arch::SlotMil { .. } => {
                let (slots, attention) = self.slots(tape, b, x)?;
                let logits = self.logits_from_slots(tape, b, slots)?;
                Ok(Forward {
                    logits,
                    slots: Some(slots),
                    attention,
                })
            }
            Arch::Pool { classifier } => {
                let pooled = match self.config.kind {
                    ModelKind::MaxPool => tape.max_rows(x)?,
                    _ => tape.mean_rows(x)?,
                };
                let out = classifier.apply(tape, b, pooled)?;
                Ok(Forward {
                    logits: tape.reshape(out, vec![c])?,
                    slots: None,
                    attention: Vec::new(),
                })
            }
            Arch::Abmil {
                att_v,
                att_u,
                att_w,
                classifier,
            } => {
                let hv = att_v.apply(tape, b, x)?;
                let hv = tape.tanh(hv);
                let hu = att_u.apply(tape, b, x)?;
                let hu = tape.sigmoid(hu);
                let gated = tape.mul(hv, hu)?;
                let scores = att_w.apply(tape, b, gated)?;
                let a = tape.softmax(scores, 0)?;
                let a_row = tape.transpose(a)?;
                let pooled = tape.matmul(a_row, x)?;
                let out = classifier.apply(tape, b, pooled)?;
                Ok(Forward {
                    logits: tape.reshape(out, vec![c])?,
                    slots: None,
                    attention: vec![HeadVars {
                        norm: HeadNorm::Key,
                        weights: a_row,
                        raw: a_row,
                    }],
                })
            }
        }
    }

    /// Forward pass over a bag outside of training.
    pub fn predict(&self, bag: &Bag) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = self.embed(&mut tape, &b, &bag.features)?;
        let f = self.forward(&mut tape, &b, x)?;
        let logits = tape.value(f.logits).clone();
        if !logits.all_finite() {
            return Err(Error::Numeric(format!("non-finite logits for bag {}", bag.bag_id)));
        }
        Ok(Prediction {
            logits,
            slots: f.slots.map(|s| tape.value(s).clone()),
            attention: AttentionMap::from_tape(&tape, &f.attention),
        })
    }
}

/// A Slot-MIL model with `S` slots, `H` heads, hidden width `d`, instance
/// width `d_h` and `C` classes.
pub fn init_model<T: Scalar>(
    slots: usize,
    heads: usize,
    dim: usize,
    d_h: usize,
    num_classes: usize,
    seed: u64,
) -> Result<MilModel<T>> {
    MilModel::new(ModelConfig::slot_mil(slots, heads, dim, d_h, num_classes), seed)
}

/// Logits, slots and attention of a Slot-MIL model on one bag.
pub fn slot_mil_forward<T: Scalar>(model: &MilModel<T>, bag: &Bag) -> Result<Prediction<T>> {
    if model.kind() != ModelKind::SlotMil {
        return Err(Error::Parameter(format!("{} is not a Slot-MIL model", model.kind())));
    }
    model.predict(bag)
}

/// Logits of a baseline model on one bag.
pub fn baseline_forward<T: Scalar>(model: &MilModel<T>, bag: &Bag) -> Result<Tensor<T>> {
    if model.kind() == ModelKind::SlotMil {
        return Err(Error::Parameter("slot-mil is not a baseline".into()));
    }
    Ok(model.predict(bag)?.logits)
}

pub type MilModel32 = MilModel<f32>;
pub type MilModel64 = MilModel<f64>;
