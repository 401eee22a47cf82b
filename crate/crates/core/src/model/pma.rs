//! Pooling by multihead attention onto learnable inducing points.

use crate::error::{Error, Result};
use crate::model::params::{Bound, ParamId, ParamSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Added to query-normalized weights before each slot's renormalization.
pub const QUERY_NORM_EPS: f64 = 1e-8;

/// Which axis a head's softmax runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadNorm {
    /// Over patches: patches compete for each slot.
    Key,
    /// Over slots: slots compete for each patch.
    Query,
}

impl HeadNorm {
    /// First `ceil(H/2)` heads use key normalization, the rest query.
    pub fn hybrid(heads: usize) -> Vec<HeadNorm> {
        let n_key = heads.div_ceil(2);
        (0..heads)
            .map(|h| if h < n_key { HeadNorm::Key } else { HeadNorm::Query })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearIds {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let weight = ps.add_normal(
            &format!("{name}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        LinearIds { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        match self.bias {
            Some(bias) => tape.add_row(y, b.var(bias)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        LayerNormIds {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta), T::of(LN_EPS))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Residual refinement `S = MLP(LN(S')) + S'` with one ReLU hidden layer.
#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub ln: LayerNormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Shape of one PMA module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PmaSpec {
    pub num_points: usize,
    pub input_dim: usize,
    /// Width of the query/key projections summed over heads.
    pub dim: usize,
    pub heads: usize,
    /// Value width per head.
    pub value_dim: usize,
    /// Output projection + `+Q` residual + MLP, as in the slot-producing module.
    pub residual: bool,
}

/// Parameter layout of one PMA module.
#[derive(Clone, Debug)]
pub struct Pma {
    pub spec: PmaSpec,
    pub inducing: ParamId,
    pub ln_inducing: LayerNormIds,
    pub ln_input: LayerNormIds,
    pub heads: Vec<HeadIds>,
    pub norms: Vec<HeadNorm>,
    pub out_proj: Option<LinearIds>,
    pub mlp: Option<MlpIds>,
}

/// Tape variables of one head's attention: the weights that multiply the
/// values, and the raw softmax output before any renormalization.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub norm: HeadNorm,
    pub weights: Var,
    pub raw: Var,
}

impl Pma {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        spec: PmaSpec,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if spec.heads == 0 || spec.dim == 0 || spec.num_points == 0 {
            return Err(Error::Parameter(format!("degenerate PMA {spec:?}")));
        }
        if spec.dim % spec.heads != 0 {
            return Err(Error::Parameter(format!(
                "dim {} is not divisible by {} heads",
                spec.dim, spec.heads
            )));
        }
        let d_i = spec.input_dim;
        let d_head = spec.dim / spec.heads;
        let inducing = ps.add_normal(
            &format!("{name}.inducing"),
            &[spec.num_points, d_i],
            1.0 / (d_i as f64).sqrt(),
            rng,
        );
        let ln_inducing = LayerNormIds::new(ps, &format!("{name}.ln_inducing"), d_i);
        let ln_input = LayerNormIds::new(ps, &format!("{name}.ln_input"), spec.input_dim);
        let std = 1.0 / (spec.input_dim as f64).sqrt();
        let heads = (0..spec.heads)
            .map(|h| HeadIds {
                wq: ps.add_normal(&format!("{name}.head{h}.wq"), &[d_i, d_head], std, rng),
                wk: ps.add_normal(&format!("{name}.head{h}.wk"), &[spec.input_dim, d_head], std, rng),
                wv: ps.add_normal(&format!("{name}.head{h}.wv"), &[spec.input_dim, spec.value_dim], std, rng),
            })
            .collect();
        let (out_proj, mlp) = if spec.residual {
            let cat = spec.heads * spec.value_dim;
            let out = LinearIds::new(ps, &format!("{name}.out_proj"), cat, spec.dim, true, rng);
            let mlp = MlpIds {
                ln: LayerNormIds::new(ps, &format!("{name}.mlp.ln"), spec.dim),
                fc1: LinearIds::new(ps, &format!("{name}.mlp.fc1"), spec.dim, spec.dim, true, rng),
                fc2: LinearIds::new(ps, &format!("{name}.mlp.fc2"), spec.dim, spec.dim, true, rng),
            };
            (Some(out), Some(mlp))
        } else {
            (None, None)
        };
        Ok(Pma {
            norms: HeadNorm::hybrid(spec.heads),
            spec,
            inducing,
            ln_inducing,
            ln_input,
            heads,
            out_proj,
            mlp,
        })
    }

    /// Output width per inducing point.
    pub fn output_dim(&self) -> usize {
        if self.spec.residual {
            self.spec.dim
        } else {
            self.spec.heads * self.spec.value_dim
        }
    }

    /// Pools the rows of `x` (`M × input_dim`) onto the inducing points.
    ///
    /// Returns the `num_points × output_dim` result and each head's attention.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        x: Var,
    ) -> Result<(Var, Vec<HeadVars>)> {
        let xv = tape.value(x);
        let (_, width) = xv.dims2()?;
        if width != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "PMA expects width {}, got {width}",
                self.spec.input_dim
            )));
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("non-finite PMA input".into()));
        }
        let ind = self.ln_inducing.apply(tape, b, b.var(self.inducing))?;
        let xn = self.ln_input.apply(tape, b, x)?;
        let d_head = self.spec.dim / self.spec.heads;
        let scale = T::one() / T::of_usize(d_head).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut queries = Vec::with_capacity(self.heads.len());
        let mut attn = Vec::with_capacity(self.heads.len());
        for (head, &norm) in self.heads.iter().zip(&self.norms) {
            let q = tape.matmul(ind, b.var(head.wq))?;
            let k = tape.matmul(xn, b.var(head.wk))?;
            let v = tape.matmul(xn, b.var(head.wv))?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let (weights, raw) = match norm {
                HeadNorm::Key => {
                    let a = tape.softmax(scores, 1)?;
                    (a, a)
                }
                HeadNorm::Query => {
                    let raw = tape.softmax(scores, 0)?;
                    (tape.normalize_rows(raw, T::of(QUERY_NORM_EPS))?, raw)
                }
            };
            outs.push(tape.matmul(weights, v)?);
            queries.push(q);
            attn.push(HeadVars { norm, weights, raw });
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let (Some(proj), Some(mlp)) = (&self.out_proj, &self.mlp) else {
            return Ok((cat, attn));
        };
        let projected = proj.apply(tape, b, cat)?;
        let q_all = if queries.len() == 1 { queries[0] } else { tape.concat_cols(&queries)? };
        let s_prime = tape.add(projected, q_all)?;
        let h = mlp.ln.apply(tape, b, s_prime)?;
        let h = mlp.fc1.apply(tape, b, h)?;
        let h = tape.relu(h);
        let h = mlp.fc2.apply(tape, b, h)?;
        Ok((tape.add(h, s_prime)?, attn))
    }
}
