//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records eagerly evaluated operations; [`Graph::backward`]
//! walks them in reverse and accumulates gradients for the parameters of a
//! [`ParamStore`]. Everything is 64-bit so finite-difference checks are
//! meaningful.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect())
    }
}

/// Gradients aligned with the parameters of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Mat>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    WeightedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Sum(Var),
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    (xhat, inv_std)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(self.value(x));
        self.push(xhat.clone(), Op::LayerNorm { x, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    /// `Σᵢ wᵢ · (−log softmax(logitsᵢ)[targetᵢ])` as a `1 × 1` value.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        assert_eq!(targets.len(), weights.len());
        let probs = softmax_rows(l);
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row: Vec<f64> = l.row(i).to_vec();
                total -= w * log_softmax_row(&row)[t];
            }
        }
        self.push(
            Mat::from_elem((1, 1), total),
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// `Σᵢ wᵢ · BCE(σ(zᵢ), yᵢ)` over an `n × 1` logit column.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), (labels.len(), 1));
        let total: f64 = labels
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&y, &w))| w * (softplus(z[[i, 0]]) - y * z[[i, 0]]))
            .sum();
        self.push(
            Mat::from_elem((1, 1), total),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Reverse pass from a `1 × 1` loss; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = self.params.zero_grads();
        grads[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.0[id.0] += &g,
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, dr);
                }
                Op::MulRow(a, row) => {
                    let dr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*row);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *row, dr);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut da = g;
                    da.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let da = &g * &y.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut da = &g * y;
                    for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |d, &p| *d -= p * dot);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![row..row + h, ..]).to_owned());
                        row += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    da.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    let h = g.nrows();
                    da.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::WeightedNll {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = dl.row_mut(i);
                        row[t] -= 1.0;
                        row.mapv_inplace(|v| v * w * upstream);
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::BceWithLogits {
                    logits,
                    labels,
                    weights,
                } => {
                    let upstream = g[[0, 0]];
                    let z = self.value(*logits);
                    let mut dz = Mat::zeros(z.raw_dim());
                    for i in 0..labels.len() {
                        dz[[i, 0]] = upstream * weights[i] * (sigmoid(z[[i, 0]]) - labels[i]);
                    }
                    acc(&mut grads, *logits, dz);
                }
                Op::Sum(a) => {
                    let da = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, da);
                }
            }
        }
        out
    }
}
