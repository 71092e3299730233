//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D [`Mat`]; scalars are `1×1`. A [`Graph`] records
//! operations as they are applied and [`Graph::backward`] walks the tape in
//! reverse. Nodes created with [`Graph::constant`] never receive gradients.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNormalize(Var, f64),
    LayerNorm(Var, Mat),
    Sum(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    BroadcastRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sum_rows(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    fn unary(&mut self, x: Var, value: Mat, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.unary(x, value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.binary(a, b, value, Op::Div(a, b))
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.binary(a, row, value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.unary(x, value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) + k;
        self.unary(x, value, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.unary(x, value, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        self.unary(x, value, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        self.binary(a, b, value, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        self.binary(a, b, value, Op::Maximum(a, b))
    }

    /// Row-wise softmax. Columns with `col_valid[j] == false` get probability
    /// zero; a row with no valid column is all zeros.
    pub fn softmax_rows(&mut self, x: Var, col_valid: Option<&[bool]>) -> Var {
        let value = softmax_rows_value(self.value(x), col_valid);
        self.unary(x, value, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.unary(x, value, Op::LogSoftmaxRows(x))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
        }
        self.unary(x, value, Op::RowNormalize(x, eps))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (r, c) = src.dim();
        let mut value = src.clone();
        let mut inv_std = Mat::zeros((r, 1));
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[i, 0]] = is;
            row.mapv_inplace(|v| (v - mean) * is);
        }
        self.unary(x, value, Op::LayerNorm(x, inv_std))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    /// Column sums as a `1×C` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = sum_rows(self.value(x));
        self.unary(x, value, Op::SumRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.unary(x, value, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.unary(x, value, Op::SliceCols(x, start))
    }

    /// Embedding lookup; rows may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let src = self.value(table);
        let value = src.select(Axis(0), idx);
        self.unary(table, value, Op::GatherRows(table, idx.to_vec()))
    }

    /// Collects the listed entries into a `1×k` row.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Var {
        let src = self.value(x);
        let value = Mat::from_shape_fn((1, at.len()), |(_, k)| src[at[k]]);
        self.unary(x, value, Op::Pick(x, at.to_vec()))
    }

    /// Repeats a `1×C` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let src = self.value(row);
        let value = src
            .broadcast((n, src.ncols()))
            .expect("broadcast_rows expects a single row")
            .to_owned();
        self.unary(row, value, Op::BroadcastRows(row))
    }

    /// Backpropagates from `output` with unit seed.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Mat::ones(self.value(output).dim());
        self.backward_with(&[(output, seed)])
    }

    /// Backpropagates from several nodes at once, each with its own upstream
    /// gradient. Seeds on the same node accumulate.
    pub fn backward_with(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if want(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if want(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(x) => accumulate(grads, *x, g.t().to_owned()),
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if want(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if want(*a) {
                    accumulate(grads, *a, g / bv);
                }
                if want(*b) {
                    let y = &node.value;
                    accumulate(grads, *b, -(g * y) / bv);
                }
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*r) {
                    accumulate(grads, *r, sum_rows(g));
                }
            }
            Op::MulRow(a, r) => {
                if want(*a) {
                    accumulate(grads, *a, g * self.value(*r));
                }
                if want(*r) {
                    accumulate(grads, *r, sum_rows(&(g * self.value(*a))));
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g * *k),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                accumulate(grads, *x, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Exp(x) => accumulate(grads, *x, g * &node.value),
            Op::Ln(x) => accumulate(grads, *x, g / self.value(*x)),
            Op::Abs(x) => accumulate(grads, *x, g * &self.value(*x).mapv(f64::signum)),
            Op::Clamp(x, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*x), |d, &v| {
                    if v < *lo || v > *hi {
                        *d = 0.0
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = g.clone();
                let mut db = g.clone();
                ndarray::Zip::from(&mut da)
                    .and(&mut db)
                    .and(av)
                    .and(bv)
                    .for_each(|da, db, &x, &y| {
                        let pick_a = if is_min { x <= y } else { x >= y };
                        if pick_a {
                            *db = 0.0
                        } else {
                            *da = 0.0
                        }
                    });
                if want(*a) {
                    accumulate(grads, *a, da);
                }
                if want(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yy| *d -= yy * dot);
                }
                accumulate(grads, *x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let total: f64 = drow.sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &ly| *d -= ly.exp() * total);
                }
                accumulate(grads, *x, d);
            }
            Op::RowNormalize(x, eps) => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut d = g.clone();
                for ((mut drow, xrow), yrow) in
                    d.rows_mut().into_iter().zip(xv.rows()).zip(y.rows())
                {
                    let n = xrow.dot(&xrow).sqrt();
                    if n > *eps {
                        let yg = yrow.dot(&drow);
                        ndarray::Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &yy| *d = (*d - yy * yg) / n);
                    } else {
                        drow.mapv_inplace(|d| d / eps);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let c = y.ncols() as f64;
                let mut d = g.clone();
                for (r, (mut drow, yrow)) in d.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let mg = drow.sum() / c;
                    let mgy = drow.dot(&yrow) / c;
                    let is = inv_std[[r, 0]];
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yy| *d = is * (*d - mg - yy * mgy));
                }
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let k = g[[0, 0]];
                accumulate(grads, *x, Mat::from_elem(self.value(*x).dim(), k));
            }
            Op::SumRows(x) => {
                let (r, c) = self.value(*x).dim();
                accumulate(grads, *x, g.broadcast((r, c)).unwrap().to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if want(p) {
                        accumulate(grads, p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if want(p) {
                        accumulate(grads, p, g.slice(s![.., off..off + n]).to_owned());
                    }
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let mut d = Mat::zeros(self.value(*x).dim());
                let n = g.nrows();
                d.slice_mut(s![*start..*start + n, ..]).assign(g);
                accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let mut d = Mat::zeros(self.value(*x).dim());
                let n = g.ncols();
                d.slice_mut(s![.., *start..*start + n]).assign(g);
                accumulate(grads, *x, d);
            }
            Op::GatherRows(t, idx) => {
                let mut d = Mat::zeros(self.value(*t).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(grads, *t, d);
            }
            Op::Pick(x, at) => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (k, &pos) in at.iter().enumerate() {
                    d[pos] += g[[0, k]];
                }
                accumulate(grads, *x, d);
            }
            Op::BroadcastRows(x) => accumulate(grads, *x, sum_rows(g)),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Masked row softmax on a plain matrix; shared by the graph op and by
/// inference-only callers.
pub fn softmax_rows_value(x: &Mat, col_valid: Option<&[bool]>) -> Mat {
    let mut value = x.clone();
    let valid = |j: usize| col_valid.is_none_or(|m| m[j]);
    for mut row in value.rows_mut() {
        let m = row
            .iter()
            .enumerate()
            .filter(|(j, _)| valid(*j))
            .fold(f64::NEG_INFINITY, |a, (_, &b)| a.max(b));
        if m == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if valid(j) { (*v - m).exp() } else { 0.0 };
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
    value
}
