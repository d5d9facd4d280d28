//! A small reverse-mode automatic differentiation tape over dense `f64` matrices.
//!
//! Row-vector convention throughout: a linear map is `x · W` with `W` stored
//! as `[in × out]`. Parameter leaves borrow their values from a
//! [`ParamStore`], so building a graph never copies weights.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::params::{Gradients, Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// Tanh approximation.
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Cos,
    Sin,
}

/// Sparse row combination: output row `i` is `Σ w · input[j]` over `rows[i]`.
/// Rows with no entries are zero. Covers gathers, shifts and weighted blends.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(indices: &[usize]) -> Self {
        Self { rows: indices.iter().map(|&j| vec![(j, 1.0)]).collect() }
    }

    /// Row `i` takes input row `i + offset`, zero outside `0..n`.
    pub fn shift(n: usize, offset: isize) -> Self {
        let rows = (0..n as isize)
            .map(|i| {
                let j = i + offset;
                if (0..n as isize).contains(&j) {
                    vec![(j as usize, 1.0)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { rows }
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows.len(), input.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, w) in row {
                dst.scaled_add(w, &input.row(j));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNorm(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Mix(Var, Arc<RowMix>),
    Sum(Var),
    CrossEntropySum(Var, Arc<Vec<usize>>),
    SquaredErrorSum(Var, Arc<Mat>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Mat>,
    aux: Option<Mat>,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`].
pub struct Backward {
    pub params: Gradients,
    vars: HashMap<usize, Mat>,
}

impl Backward {
    /// Gradient with respect to a variable created by [`Tape::var`].
    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.vars.get(&v.0)
    }
}

const LN_EPS: f64 = 1e-12;

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Mat, aux: Option<Mat>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), aux, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node.value.as_ref().expect("non-parameter nodes hold values"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, None, false)
    }

    /// Input whose gradient is reported by [`Backward::var`].
    pub fn var(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, None, true)
    }

    /// Parameter leaf; gradients flow only when the parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.store.is_trainable(id);
        self.nodes.push(Node { op: Op::Param(id), value: None, aux: None, requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, None, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulT(a, b), v, None, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, None, rg)
    }

    /// Adds the `[1 × n]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "add_row expects a [1 x n] row");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::AddRow(a, b), v, None, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, None, rg)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "mul_row expects a [1 x n] row");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MulRow(a, b), v, None, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), v, None, rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let v = match f {
            Unary::Relu => x.mapv(|x| x.max(0.0)),
            Unary::Gelu => x.mapv(gelu),
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Tanh => x.mapv(f64::tanh),
            Unary::Exp => x.mapv(f64::exp),
            Unary::Cos => x.mapv(f64::cos),
            Unary::Sin => x.mapv(f64::sin),
        };
        let rg = self.rg(a);
        self.push(Op::Unary(a, f), v, None, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), v, None, rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv_std = Mat::zeros((x.nrows(), 1));
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std[[i, 0]] = inv;
        }
        let rg = self.rg(a);
        self.push(Op::LayerNorm(a), y, Some(inv_std), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, None, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows column counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, None, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), v, None, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, start), v, None, rg)
    }

    pub fn mix(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let v = mix.apply(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Mix(a, mix), v, None, rg)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        self.mix(a, Arc::new(RowMix::gather(indices)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, None, rg)
    }

    /// `Σ_rows −log softmax(logits)[target]` as a `[1 × 1]` value.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len(), "one target per row");
        let probs = softmax_rows(z);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let rg = self.rg(logits);
        self.push(Op::CrossEntropySum(logits, targets), Array2::from_elem((1, 1), loss), Some(probs), rg)
    }

    /// `Σ (pred − target)²` as a `[1 × 1]` value.
    pub fn squared_error_sum(&mut self, pred: Var, target: Arc<Mat>) -> Var {
        let diff = self.value(pred) - &*target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>();
        let rg = self.rg(pred);
        self.push(Op::SquaredErrorSum(pred, target), Array2::from_elem((1, 1), loss), None, rg)
    }

    /// Linear layer `x · W + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    /// Reverse pass from a `[1 × 1]` root.
    pub fn backward(&self, root: Var) -> Backward {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulRow(a, b) => {
                    if self.rg(*b) {
                        let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Unary(a, f) => {
                    let x = self.value(*a);
                    let y = node.value.as_ref().expect("value");
                    let mut gx = g;
                    match f {
                        Unary::Relu => Zip::from(&mut gx).and(x).for_each(|g, &x| *g *= if x > 0.0 { 1.0 } else { 0.0 }),
                        Unary::Gelu => Zip::from(&mut gx).and(x).for_each(|g, &x| *g *= gelu_grad(x)),
                        Unary::Sigmoid => Zip::from(&mut gx).and(y).for_each(|g, &y| *g *= y * (1.0 - y)),
                        Unary::Tanh => Zip::from(&mut gx).and(y).for_each(|g, &y| *g *= 1.0 - y * y),
                        Unary::Exp => Zip::from(&mut gx).and(y).for_each(|g, &y| *g *= y),
                        Unary::Cos => Zip::from(&mut gx).and(x).for_each(|g, &x| *g *= -x.sin()),
                        Unary::Sin => Zip::from(&mut gx).and(x).for_each(|g, &x| *g *= x.cos()),
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |r, &yv| *r -= dot * yv);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm(a) => {
                    let y = node.value.as_ref().expect("value");
                    let inv_std = node.aux.as_ref().expect("aux");
                    let n = y.ncols() as f64;
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(i);
                        let mean_g = row.sum() / n;
                        let mean_gy = row.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum::<f64>() / n;
                        let inv = inv_std[[i, 0]];
                        row.zip_mut_with(&yrow, |gv, &yv| *gv = inv * (*gv - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut full = Mat::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SliceRows(a, start) => {
                    let mut full = Mat::zeros(self.value(*a).raw_dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::Mix(a, mix) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (i, row) in mix.rows.iter().enumerate() {
                        for &(j, w) in row {
                            ga.row_mut(j).scaled_add(w, &g.row(i));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).raw_dim(), s));
                }
                Op::CrossEntropySum(a, targets) => {
                    let s = g[[0, 0]];
                    let mut ga = node.aux.as_ref().expect("probs").clone();
                    for (i, &t) in targets.iter().enumerate() {
                        ga[[i, t]] -= 1.0;
                    }
                    ga.mapv_inplace(|v| v * s);
                    acc(&mut grads, *a, ga);
                }
                Op::SquaredErrorSum(a, target) => {
                    let s = g[[0, 0]];
                    let ga = (self.value(*a) - &**target) * (2.0 * s);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        let mut params = Gradients::zeros(self.store.len());
        let mut vars = HashMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[idx].op {
                Op::Param(id) => params.accumulate(id, &g),
                Op::Leaf => {
                    vars.insert(idx, g);
                }
                _ => {}
            }
        }
        Backward { params, vars }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Central finite-difference check helpers shared by unit and acceptance tests.
pub mod gradcheck {
    use super::*;

    /// Largest relative error between analytic and central-difference
    /// gradients over every entry of the listed parameters.
    pub fn max_param_error(
        store: &mut ParamStore,
        ids: &[ParamId],
        h: f64,
        mut loss: impl FnMut(&ParamStore) -> (f64, Gradients),
    ) -> f64 {
        let (_, analytic) = loss(store);
        let mut worst: f64 = 0.0;
        for &id in ids {
            let dims = store.value(id).dim();
            let zero = Mat::zeros(dims);
            let ga = analytic.get(id).cloned().unwrap_or(zero);
            for r in 0..dims.0 {
                for c in 0..dims.1 {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + h;
                    let (lp, _) = loss(store);
                    store.value_mut(id)[[r, c]] = orig - h;
                    let (lm, _) = loss(store);
                    store.value_mut(id)[[r, c]] = orig;
                    worst = worst.max(relative_error(ga[[r, c]], (lp - lm) / (2.0 * h)));
                }
            }
        }
        worst
    }

    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
    /// gradient is zero from dividing rounding noise by zero.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        (analytic - numeric).abs() / denom
    }
}
