//! Reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the recorded leaves.
//! Values are plain `Array2<f64>`; row vectors are `1 x n` matrices. The op
//! set is exactly what the transformer backend, the prompt encoder and the
//! training objectives need — this is not a general tensor library.
//!
//! Frozen parameters enter as [`Tape::constant`] leaves, so no gradient is
//! ever computed for them; trainable parameters enter via [`Tape::param`].

use ndarray::{s, Array2, Axis};

use crate::{Error, Result};

const LN_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    AddRowBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    PickRow(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    Recip(Var),
    Sqrt(Var),
    /// Multiplies a matrix elementwise by a `1 x 1` scalar node.
    MulScalar(Var, Var),
    SumAll(Var),
    /// `logsumexp(logits) - logits[gold]` for a `1 x n` logits row.
    CrossEntropyLogits(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, x: Var) -> &Array2<f64> {
        &self.nodes[x.0].value
    }

    /// Gradient of the last `backward` root with respect to `x`.
    /// Zero if the root does not depend on `x`.
    pub fn grad(&self, x: Var) -> Array2<f64> {
        match &self.grads[x.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[x.0].value.raw_dim()),
        }
    }

    /// Non-trainable leaf: no gradient will be accumulated for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + &self.value(row).row(0);
        self.binary(a, row, v, Op::AddRowBroadcast(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn pick_row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).row(i).to_owned().insert_axis(Axis(0));
        self.unary(a, v, Op::PickRow(a, i))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (j, &r) in idx.iter().enumerate() {
            v.row_mut(j).assign(&src.row(r));
        }
        self.unary(a, v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((src.nrows(), idx.len()));
        for (j, &c) in idx.iter().enumerate() {
            v.column_mut(j).assign(&src.column(c));
        }
        self.unary(a, v, Op::GatherCols(a, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.unary(a, v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_tanh);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(LN_FLOOR).ln());
        self.unary(a, v, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.unary(a, v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Var {
        debug_assert_eq!(self.value(scalar).dim(), (1, 1));
        let c = self.value(scalar)[(0, 0)];
        let v = self.value(a) * c;
        self.binary(a, scalar, v, Op::MulScalar(a, scalar))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    /// Negative log likelihood of `gold` under softmax of a `1 x n` logits row.
    pub fn cross_entropy_logits(&mut self, logits: Var, gold: usize) -> Var {
        let row = self.value(logits).row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let v = Array2::from_elem((1, 1), lse - row[gold]);
        self.unary(logits, v, Op::CrossEntropyLogits(logits, gold))
    }

    pub fn scalar(&self, x: Var) -> f64 {
        self.value(x)[(0, 0)]
    }

    /// Backpropagates from a `1 x 1` root. Gradients accumulate across calls
    /// only within one tape; a new forward pass needs a new tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::Shape("backward root must be 1x1".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, delta: Array2<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, i: usize, g: &Array2<f64>) {
        // `Op` owns no Vars mutably; clone the small descriptors out to keep
        // the borrow checker happy.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.dot(&self.value(b).t());
                let db = self.value(a).t().dot(g);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRowBroadcast(a, row) => {
                let (a, row) = (*a, *row);
                self.accumulate(a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(row, dr);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g * self.value(b);
                let db = g * self.value(a);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, g * c);
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accumulate(a, g.t().to_owned());
            }
            Op::PickRow(a, r) => {
                let (a, r) = (*a, *r);
                let mut da = Array2::zeros(self.value(a).raw_dim());
                da.row_mut(r).assign(&g.row(0));
                self.accumulate(a, da);
            }
            Op::GatherRows(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                let mut da = Array2::zeros(self.value(a).raw_dim());
                for (j, &r) in idx.iter().enumerate() {
                    let mut row = da.row_mut(r);
                    row += &g.row(j);
                }
                self.accumulate(a, da);
            }
            Op::GatherCols(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                let mut da = Array2::zeros(self.value(a).raw_dim());
                for (j, &c) in idx.iter().enumerate() {
                    let mut col = da.column_mut(c);
                    col += &g.column(j);
                }
                self.accumulate(a, da);
            }
            Op::SliceCols(a, start, end) => {
                let (a, start, end) = (*a, *start, *end);
                let mut da = Array2::zeros(self.value(a).raw_dim());
                da.slice_mut(s![.., start..end]).assign(g);
                self.accumulate(a, da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let w = self.value(p).ncols();
                    let dp = g.slice(s![.., at..at + w]).to_owned();
                    at += w;
                    self.accumulate(p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let h = self.value(p).nrows();
                    let dp = g.slice(s![at..at + h, ..]).to_owned();
                    at += h;
                    self.accumulate(p, dp);
                }
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut da = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    for c in 0..y.ncols() {
                        da[(r, c)] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = self.value(x).clone();
                let gv = self.value(gamma).row(0).to_owned();
                let n = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&e| (e - mean) * inv).collect();
                    let gr = g.row(r);
                    let mut dxhat = vec![0.0; xv.ncols()];
                    for c in 0..xv.ncols() {
                        dbeta[(0, c)] += gr[c];
                        dgamma[(0, c)] += gr[c] * xhat[c];
                        dxhat[c] = gr[c] * gv[c];
                    }
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                    for c in 0..xv.ncols() {
                        dx[(r, c)] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Gelu(a) => {
                let a = *a;
                let da = g * &self.value(a).mapv(gelu_tanh_deriv);
                self.accumulate(a, da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da = g * &self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da = g * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                self.accumulate(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da = g * &self.nodes[i].value.mapv(|y| y * (1.0 - y));
                self.accumulate(a, da);
            }
            Op::Ln(a) => {
                let a = *a;
                let da = g / &self.value(a).mapv(|x| x.max(LN_FLOOR));
                self.accumulate(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da = g * &self.nodes[i].value;
                self.accumulate(a, da);
            }
            Op::Recip(a) => {
                let a = *a;
                let da = -(g * &self.nodes[i].value.mapv(|y| y * y));
                self.accumulate(a, da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let da = g * &self.nodes[i].value.mapv(|y| 0.5 / y);
                self.accumulate(a, da);
            }
            Op::MulScalar(a, scalar) => {
                let (a, scalar) = (*a, *scalar);
                let c = self.value(scalar)[(0, 0)];
                let da = g * c;
                let ds = Array2::from_elem((1, 1), (g * self.value(a)).sum());
                self.accumulate(a, da);
                self.accumulate(scalar, ds);
            }
            Op::SumAll(a) => {
                let a = *a;
                let da = Array2::from_elem(self.value(a).raw_dim(), g[(0, 0)]);
                self.accumulate(a, da);
            }
            Op::CrossEntropyLogits(logits, gold) => {
                let (logits, gold) = (*logits, *gold);
                let row = self.value(logits).row(0);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                let mut da = Array2::zeros((1, row.len()));
                for c in 0..row.len() {
                    da[(0, c)] = (row[c] - max).exp() / sum;
                }
                da[(0, gold)] -= 1.0;
                self.accumulate(logits, &da * g[(0, 0)]);
            }
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
///
/// Parameters are passed as a slice each step; order and shapes must stay
/// fixed across the optimizer's lifetime.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m *= self.beta1;
            m.scaled_add(1.0 - self.beta1, g);
            *v *= self.beta2;
            v.zip_mut_with(g, |ve, &ge| *ve += (1.0 - self.beta2) * ge * ge);
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pe, &me, &ve| {
                    let mhat = me / bc1;
                    let vhat = ve / bc2;
                    *pe -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Central-difference gradient of `f` at `point`.
///
/// Test oracle for every analytic gradient in the crate; lives here so unit
/// and integration suites share one implementation, but it never feeds any
/// production path.
pub fn finite_diff_grad<F>(mut f: F, point: &Array2<f64>, eps: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(point.raw_dim());
    let mut work = point.clone();
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let orig = work[(r, c)];
        work[(r, c)] = orig + eps;
        let fp = f(&work);
        work[(r, c)] = orig - eps;
        let fm = f(&work);
        work[(r, c)] = orig;
        grad[(r, c)] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
