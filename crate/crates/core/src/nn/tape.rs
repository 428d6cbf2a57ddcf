//! Reverse-mode differentiation over 2-D matrices.
//!
//! A [`Tape`] records every op of one forward pass. Parameter leaves borrow
//! their values from a [`ParamSet`]; everything else owns its output. Calling
//! [`Tape::backward`] on a scalar produces one gradient matrix per parameter.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, Axis};

use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    RelPos { table: Var, head: usize, clip: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MulConst { x: Var, factor: Mat },
    ColAffine { x: Var, scale: Vec<f64> },
    GatherRows { table: Var, rows: Vec<usize> },
    EuclideanLoss { pred: Var, target: Mat },
    MseLoss { pred: Var, target: Mat },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
enum Value {
    Owned(Mat),
    Param(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
}

pub struct Tape<'p> {
    id: usize,
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn row_softmax(x: &Mat, mask: Option<&Array2<bool>>) -> Result<Mat> {
    let mut out = Mat::zeros(x.raw_dim());
    for (r, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let keep = |c: usize| mask.map_or(true, |m| !m[[r, c]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| keep(*c))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let mut total = 0.0;
        for (c, (v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if keep(c) {
                *d = (v - max).exp();
                total += *d;
            }
        }
        dst.mapv_inplace(|v| v / total);
    }
    Ok(out)
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax with masked entries (true = blocked) forced to exactly zero.
pub fn masked_softmax(x: &Mat, mask: Option<&Array2<bool>>) -> Result<Mat> {
    row_softmax(x, mask)
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    row_log_softmax(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        match &self.nodes[v.idx].value {
            Value::Owned(m) => m,
            Value::Param(p) => self.params.value(*p),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(index),
            value: Value::Param(index),
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let idx = self.params.index(name)?;
        Ok(self.param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + &r.row(0);
        self.push(Op::AddRow(a, row), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, out)
    }

    /// Row-wise softmax; `mask` entries that are `true` get weight exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&Array2<bool>>) -> Result<Var> {
        let out = row_softmax(self.value(x), mask)?;
        Ok(self.push(Op::Softmax(x), out))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = row_log_softmax(self.value(x));
        self.push(Op::LogSoftmax(x), out)
    }

    /// `n x m` bias with `bias[i][j] = table[head][clamp(j - i, -clip, clip) + clip]`.
    pub fn relpos_bias(&mut self, table: Var, head: usize, n: usize, m: usize, clip: usize) -> Var {
        let t = self.value(table);
        assert_eq!(t.ncols(), 2 * clip + 1, "relative-position table width");
        let row = t.row(head).to_vec();
        let out = relpos_matrix(&row, n, m, clip);
        self.push(Op::RelPos { table, head, clip }, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Mat) -> Var {
        let out = self.value(x) * &factor;
        self.push(Op::MulConst { x, factor }, out)
    }

    /// `x * scale + shift`, per column, with constant scale and shift.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            for ((v, a), b) in row.iter_mut().zip(scale).zip(shift) {
                *v = *v * a + b;
            }
        }
        self.push(Op::ColAffine { x, scale: scale.to_vec() }, out)
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let out = self.value(table).select(Axis(0), rows);
        self.push(Op::GatherRows { table, rows: rows.to_vec() }, out)
    }

    /// Mean over frames of the per-frame Euclidean distance.
    pub fn euclidean_loss(&mut self, pred: Var, target: &Mat) -> Result<Var> {
        let p = self.value(pred);
        check_same_shape(p, target)?;
        let frames = p.nrows() as f64;
        let total: f64 = (p - target)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum();
        let out = Mat::from_elem((1, 1), total / frames);
        Ok(self.push(Op::EuclideanLoss { pred, target: target.clone() }, out))
    }

    /// Mean over every entry of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: &Mat) -> Result<Var> {
        let p = self.value(pred);
        check_same_shape(p, target)?;
        let diff = p - target;
        let out = Mat::from_elem((1, 1), diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64);
        Ok(self.push(Op::MseLoss { pred, target: target.clone() }, out))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.nrows() != targets.len() {
            return Err(Error::param(format!(
                "{} logit rows for {} targets",
                l.nrows(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= l.ncols()) {
            return Err(Error::param(format!("target class {bad} out of range")));
        }
        let logp = row_log_softmax(l);
        let nll: f64 = targets.iter().enumerate().map(|(r, t)| -logp[[r, *t]]).sum();
        let out = Mat::from_elem((1, 1), nll / targets.len() as f64);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec() }, out))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::State("backward called on a variable this tape never produced".into()));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Grads::zeros_like(self.params);

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, delta: Mat| match &mut grads[v.idx] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => out.accumulate(*p, &g),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Scale(a, f) => acc(*a, g * *f),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(*a, g * d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma);
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &gam.row(0);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var { tape: self.id, idx });
                    let mut dx = &g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&yrow, |d, yv| *d -= yv * dot);
                    }
                    acc(*x, dx);
                }
                Op::LogSoftmax(x) => {
                    let y = self.value(Var { tape: self.id, idx });
                    let mut dx = g.clone();
                    for (mut row, (grow, yrow)) in dx.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows())) {
                        let total = grow.sum();
                        row.zip_mut_with(&yrow, |d, yv| *d -= yv.exp() * total);
                    }
                    acc(*x, dx);
                }
                Op::RelPos { table, head, clip } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.raw_dim());
                    let c = *clip as isize;
                    for ((i, j), v) in g.indexed_iter() {
                        let off = (j as isize - i as isize).clamp(-c, c) + c;
                        dt[[*head, off as usize]] += v;
                    }
                    acc(*table, dt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::MulConst { x, factor } => acc(*x, g * factor),
                Op::ColAffine { x, scale } => {
                    let mut dx = g;
                    for mut row in dx.rows_mut() {
                        row.iter_mut().zip(scale).for_each(|(v, a)| *v *= a);
                    }
                    acc(*x, dx);
                }
                Op::GatherRows { table, rows } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.raw_dim());
                    for (r, src) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(*src);
                        dst += &g.row(r);
                    }
                    acc(*table, dt);
                }
                Op::EuclideanLoss { pred, target } => {
                    let scale = g[[0, 0]] / target.nrows() as f64;
                    let mut d = self.value(*pred) - target;
                    for mut row in d.rows_mut() {
                        let norm = row.dot(&row).sqrt();
                        // the norm has no gradient at a zero residual; use 0
                        let f = if norm > 0.0 { scale / norm } else { 0.0 };
                        row.mapv_inplace(|v| v * f);
                    }
                    acc(*pred, d);
                }
                Op::MseLoss { pred, target } => {
                    let f = 2.0 * g[[0, 0]] / target.len() as f64;
                    acc(*pred, (self.value(*pred) - target) * f);
                }
                Op::CrossEntropy { logits, targets } => {
                    let f = g[[0, 0]] / targets.len() as f64;
                    let mut d = row_softmax(self.value(*logits), None)?;
                    for (r, t) in targets.iter().enumerate() {
                        d[[r, *t]] -= 1.0;
                    }
                    acc(*logits, d * f);
                }
            }
        }
        Ok(out)
    }
}

fn check_same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::param(format!(
            "shape mismatch: prediction {:?} vs target {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Relative-position bias from one head's table of `2 * clip + 1` entries.
pub fn relpos_matrix(table: &[f64], n: usize, m: usize, clip: usize) -> Mat {
    let c = clip as isize;
    Mat::from_shape_fn((n, m), |(i, j)| {
        table[((j as isize - i as isize).clamp(-c, c) + c) as usize]
    })
}

/// Mask that blocks every key position after the query position (true = blocked).
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j > i)
}
