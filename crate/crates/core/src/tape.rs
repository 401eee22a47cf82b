//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its forward value and the data
//! its adjoint needs. [`Tape::grad`] walks the nodes in reverse recording
//! order and accumulates adjoints only into nodes that depend on a leaf.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    NormalizeRows {
        x: Var,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Reshape(Var),
    SoftmaxXent {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Probability floor shared by the cross-entropy loss and the NLL metric.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax over a slice with max subtraction.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-ln(max(p, PROB_FLOOR))`.
pub fn neg_log_prob<T: Scalar>(p: T) -> T {
    // subtracting from zero keeps p = 1 at +0 rather than -0
    T::zero() - p.max(T::of(PROB_FLOOR)).ln()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.macs = 0;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("variable {} is not on this tape", v.0)))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.cols();
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_op(&mut self, x: Var, r: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, rv) = (self.value(x), self.value(r));
        let n = xv.cols();
        if rv.len() != n {
            return Err(Error::Dimension(format!(
                "{what}: row vector of length {} against width {n}",
                rv.len()
            )));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&p, &q)| f(p, q)))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_op(x, bias, "add_row", |p, q| p + q)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row of `x` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_op(x, g, "mul_row", |p, q| p * q)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulRow(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Divides each row of a non-negative matrix by its sum after adding `eps`
    /// to every entry.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims2()?;
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let z: T = row.iter().map(|&v| v + eps).sum();
            data.extend(row.iter().map(|&v| (v + eps) / z));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, eps }, rg))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: width {d} but gamma {:?} and beta {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let rows = xv.len() / d;
        let dn = T::of_usize(d);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {m} and {pm} differ"
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Column means of a matrix, as a 1×n matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let mn = T::of_usize(m);
        out.iter_mut().for_each(|o| *o = *o / mn);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), rg))
    }

    /// Column maxima of a matrix, as a 1×n matrix. Ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let xv = self.value(x);
        let mut out = xv.row(0).to_vec();
        let mut argmax = vec![0usize; n];
        for (i, row) in xv.data().chunks(n).enumerate().skip(1) {
            for j in 0..n {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MaxRows { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Cross-entropy `-Σ_c target_c · ln softmax(logits)_c` as a scalar.
    ///
    /// The log-probabilities use [`neg_log_prob`] on the softmax output, so a
    /// one-hot target reproduces the NLL metric exactly.
    pub fn softmax_xent(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() {
            return Err(Error::Dimension(format!(
                "softmax_xent: {} logits against {} targets",
                lv.len(),
                target.len()
            )));
        }
        let total: T = target.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-6) || target.iter().any(|&t| t < T::zero()) {
            return Err(Error::Contract(format!(
                "target must be a probability vector, sums to {total}"
            )));
        }
        let probs = softmax_slice(lv.data());
        let loss = target
            .iter()
            .zip(&probs)
            .filter(|(&t, _)| t != T::zero())
            .map(|(&t, &p)| t * neg_log_prob(p))
            .fold(T::zero(), |a, b| a + b);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                target: target.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of a scalar `loss` with respect to `params`, then clears
    /// the tape. Parameters the loss does not reach get all-zero gradients.
    pub fn grad(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        self.check_var(loss)?;
        for &p in params {
            self.check_var(p)?;
        }
        let adj = self.backward(loss)?;
        let out = params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                match &adj[p.0] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("adjoint matches shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        self.clear();
        Ok(out)
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, shape is {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn acc(&self, adj: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                self.acc(adj, a, |d| matmul_nt_acc(g, bv.data(), d, m, n, k));
                self.acc(adj, b, |d| matmul_tn_acc(av.data(), g, d, k, m, n));
            }
            &Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                self.acc(adj, a, |d| matmul_acc(g, bv.data(), d, m, n, k));
                self.acc(adj, b, |d| matmul_tn_acc(g, av.data(), d, n, m, k));
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                self.acc(adj, a, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] = d[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(adj, a, |d| add_into(d, g));
                self.acc(adj, b, |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                self.acc(adj, a, |d| add_into(d, g));
                self.acc(adj, b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.acc(adj, a, |d| {
                    for ((x, &gy), &w) in d.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * w;
                    }
                });
                self.acc(adj, b, |d| {
                    for ((x, &gy), &w) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * w;
                    }
                });
            }
            &Op::AddRow(x, bias) => {
                let n = out.cols();
                self.acc(adj, x, |d| add_into(d, g));
                self.acc(adj, bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            &Op::MulRow(x, gain) => {
                let n = out.cols();
                let (xv, gv) = (self.value(x).data(), self.value(gain).data());
                self.acc(adj, x, |d| {
                    for (k, (dx, &gy)) in d.iter_mut().zip(g).enumerate() {
                        *dx = *dx + gy * gv[k % n];
                    }
                });
                self.acc(adj, gain, |d| {
                    for (k, (&gy, &xx)) in g.iter().zip(xv).enumerate() {
                        d[k % n] = d[k % n] + gy * xx;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.acc(adj, x, |d| d.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * c));
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.acc(adj, x, |d| {
                    for ((a, &b), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *a = *a + b;
                        }
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = out.data();
                self.acc(adj, x, |d| {
                    for ((a, &b), &t) in d.iter_mut().zip(g).zip(y) {
                        *a = *a + b * (T::one() - t * t);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(adj, x, |d| {
                    for ((a, &b), &s) in d.iter_mut().zip(g).zip(y) {
                        *a = *a + b * s * (T::one() - s);
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), axis);
                let y = out.data();
                self.acc(adj, x, |d| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + q;
                            let dot: T = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                let k = idx(a);
                                d[k] = d[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            &Op::NormalizeRows { x, eps } => {
                let n = out.cols();
                let xv = self.value(x).data();
                let y = out.data();
                self.acc(adj, x, |d| {
                    for r in 0..out.rows() {
                        let span = r * n..(r + 1) * n;
                        let z: T = xv[span.clone()].iter().map(|&v| v + eps).sum();
                        let dot: T = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for k in span {
                            d[k] = d[k] + (g[k] - dot) / z;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gamma).data();
                let dn = T::of_usize(n);
                self.acc(adj, *x, |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for k in span.clone() {
                            let dh = g[k] * gv[k - r * n];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[k];
                        }
                        for k in span {
                            let dh = g[k] * gv[k - r * n];
                            d[k] = d[k] + is / dn * (dn * dh - s1 - xhat[k] * s2);
                        }
                    }
                });
                self.acc(adj, *gamma, |d| {
                    for (k, (&gy, &h)) in g.iter().zip(xhat).enumerate() {
                        d[k % n] = d[k % n] + gy * h;
                    }
                });
                self.acc(adj, *beta, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = (self.value(p).rows(), self.value(p).cols());
                    self.acc(adj, p, |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mn = T::of_usize(m);
                self.acc(adj, x, |d| {
                    for row in d.chunks_mut(n) {
                        for (a, &b) in row.iter_mut().zip(g) {
                            *a = *a + b / mn;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let n = out.cols();
                self.acc(adj, *x, |d| {
                    for (j, &r) in argmax.iter().enumerate() {
                        d[r * n + j] = d[r * n + j] + g[j];
                    }
                });
            }
            &Op::Sum(x) => {
                self.acc(adj, x, |d| d.iter_mut().for_each(|a| *a = *a + g[0]));
            }
            &Op::Reshape(x) => {
                self.acc(adj, x, |d| add_into(d, g));
            }
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            } => {
                let total: T = target.iter().copied().sum();
                self.acc(adj, *logits, |d| {
                    for ((a, &p), &t) in d.iter_mut().zip(probs).zip(target) {
                        *a = *a + g[0] * (p * total - t);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// Softmax of a tensor along one axis, with max subtraction.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank().max(1) {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let shape: Vec<usize> = if x.rank() == 0 { vec![1] } else { x.shape().to_vec() };
    let (outer, len, inner) = axis_layout(&shape, axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + q;
            let m = (0..len).map(|a| src[idx(a)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for a in 0..len {
                let e = (src[idx(a)] - m).exp();
                out[idx(a)] = e;
                z = z + e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Layer normalization of every last-axis vector, outside any tape.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}
