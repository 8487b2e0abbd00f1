//! Reverse-mode differentiation over the small operator set used by the
//! encoder, the scoring heads and the relation module.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Parameter leaves are keyed by their group name; gradients of a parameter
//! used more than once are summed.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::matrix::{sigmoid_scalar, Matrix};
use super::param::ParamGroup;
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm in the BCE losses.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + bias` where `bias` is a single row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `scale * a + shift`; only the scale matters for the gradient.
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// `1 / (a + eps)`.
    Reciprocal(Var),
    /// Row-wise squared L2 norm, `n x 1`.
    RowSquaredNorm(Var),
    Gather(Var, Arc<Vec<usize>>),
    /// Row `i` of the output is the mean of rows `idx[off[i]..off[i+1]]`; empty segments give zeros.
    SegmentMean(Var, Arc<Vec<usize>>, Arc<Vec<usize>>),
    ConcatCols(Var, Var),
    Mean(Var),
    Sum(Var),
    /// Mean binary cross-entropy of probabilities against soft targets.
    BceMean(Var, Arc<Vec<f64>>),
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    /// Parameters are borrowed, everything else is owned.
    value: Cow<'a, Matrix>,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`], keyed by group name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Matrix) {
        self.0.insert(name.into(), grad);
    }

    pub fn with(mut self, name: impl Into<String>, grad: Matrix) -> Self {
        self.insert(name, grad);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds each gradient into the `grad` buffer of the matching group.
    pub fn apply_to<'a>(&self, groups: impl IntoIterator<Item = &'a mut ParamGroup>) -> Result<()> {
        for group in groups {
            if let Some(g) = self.0.get(&group.name) {
                group.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Records a forward computation for one backward sweep. Parameter
/// values are borrowed for the tape's lifetime `'a`.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf bound to `group`.
    pub fn param(&mut self, group: &'a ParamGroup) -> Var {
        self.nodes.push(Node {
            op: Op::Param(group.name.clone()),
            value: Cow::Borrowed(&group.value),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(Error::shape("add_row", (rows, cols), self.shape(bias)));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddRow(a, bias), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        let rg = self.rg(a);
        self.push(Op::Affine(a, scale), value, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(Op::Abs(a), value, rg)
    }

    pub fn reciprocal(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|v| 1.0 / (v + eps));
        let rg = self.rg(a);
        self.push(Op::Reciprocal(a), value, rg)
    }

    pub fn row_squared_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms: Vec<f64> = (0..m.rows())
            .map(|r| m.row(r).iter().map(|v| v * v).sum())
            .collect();
        let value = Matrix::column(&norms);
        let rg = self.rg(a);
        self.push(Op::RowSquaredNorm(a), value, rg)
    }

    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::shape("gather", m.shape(), (bad, 0)));
        }
        let value = m.select_rows(&indices);
        let rg = self.rg(a);
        Ok(self.push(Op::Gather(a, indices), value, rg))
    }

    pub fn segment_mean(
        &mut self,
        a: Var,
        offsets: Arc<Vec<usize>>,
        indices: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let m = self.value(a);
        if offsets.is_empty() || *offsets.last().unwrap() != indices.len() {
            return Err(Error::State("segment_mean offsets do not cover indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::shape("segment_mean", m.shape(), (bad, 0)));
        }
        let segments = offsets.len() - 1;
        let mut value = Matrix::zeros(segments, m.cols());
        for s in 0..segments {
            let seg = &indices[offsets[s]..offsets[s + 1]];
            if seg.is_empty() {
                continue;
            }
            let out = value.row_mut(s);
            for &i in seg {
                for (o, x) in out.iter_mut().zip(m.row(i)) {
                    *o += x;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SegmentMean(a, offsets, indices), value, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() {
            return Err(Error::shape("concat_cols", ma.shape(), mb.shape()));
        }
        let mut data = Vec::with_capacity(ma.rows() * (ma.cols() + mb.cols()));
        for r in 0..ma.rows() {
            data.extend_from_slice(ma.row(r));
            data.extend_from_slice(mb.row(r));
        }
        let value = Matrix::from_vec(ma.rows(), ma.cols() + mb.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// Mean of all entries. The mean of an empty matrix is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.data().len();
        let v = if n == 0 { 0.0 } else { m.sum() / n as f64 };
        let rg = self.rg(a);
        self.push(Op::Mean(a), Matrix::filled(1, 1, v), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Matrix::filled(1, 1, v), rg)
    }

    /// Mean BCE of `probs` (an `n x 1` column) against soft `targets`,
    /// with probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_mean(&mut self, probs: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let p = self.value(probs);
        if p.cols() != 1 || p.rows() != targets.len() {
            return Err(Error::shape("bce_mean", p.shape(), (targets.len(), 1)));
        }
        let n = targets.len();
        let v = if n == 0 {
            0.0
        } else {
            p.data()
                .iter()
                .zip(targets.iter())
                .map(|(&p, &c)| bce_scalar(p, c))
                .sum::<f64>()
                / n as f64
        };
        let rg = self.rg(probs);
        Ok(self.push(Op::BceMean(probs, targets), Matrix::filled(1, 1, v), rg))
    }

    /// Back-propagates `seed * d(loss)/d(·)` and returns the parameter gradients.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::State(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, seed));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match out.0.get_mut(name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.0.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, g.column_sum())?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.hadamard(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let gb = g.hadamard(self.value(*a))?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Affine(a, scale) => accumulate(&mut grads, *a, g.scale(*scale))?,
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid'", |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), "abs'", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Reciprocal(a) => {
                    // d/dx (x+eps)^-1 = -(x+eps)^-2 = -y^2
                    let ga = g.zip_map(&node.value, "reciprocal'", |g, y| -g * y * y)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSquaredNorm(a) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gr = 2.0 * g.get(r, 0);
                        for (o, v) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = gr * v;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Gather(a, indices) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SegmentMean(a, offsets, indices) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for s in 0..offsets.len() - 1 {
                        let seg = &indices[offsets[s]..offsets[s + 1]];
                        if seg.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / seg.len() as f64;
                        for &i in seg {
                            for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(s)) {
                                *o += v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.rg(*a) {
                        let mut ga = Matrix::zeros(g.rows(), ca);
                        for r in 0..g.rows() {
                            ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        }
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let mut gb = Matrix::zeros(g.rows(), cb);
                        for r in 0..g.rows() {
                            gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                        }
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = r * c;
                    let v = if n == 0 { 0.0 } else { g.data()[0] / n as f64 };
                    accumulate(&mut grads, *a, Matrix::filled(r, c, v))?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]))?;
                }
                Op::BceMean(p, targets) => {
                    let probs = self.value(*p);
                    let n = targets.len().max(1) as f64;
                    let scale = g.data()[0] / n;
                    let data = probs
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .map(|(&p, &c)| scale * bce_grad_scalar(p, c))
                        .collect();
                    accumulate(&mut grads, *p, Matrix::from_vec(probs.rows(), 1, data)?)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `-(c ln p + (1-c) ln(1-p))` with `p` clamped.
#[inline]
pub fn bce_scalar(p: f64, c: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(c * p.ln() + (1.0 - c) * (1.0 - p).ln())
}

/// Derivative of [`bce_scalar`] with respect to `p`; zero where the clamp is active.
#[inline]
fn bce_grad_scalar(p: f64, c: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    (p - c) / (p * (1.0 - p))
}
