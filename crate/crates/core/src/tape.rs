//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value in the pipeline is a 2-D matrix: token grids are stored as
//! `tokens x channels`, batches of token grids are stacked row-wise, and
//! scalars are `1 x 1`. A [`Tape`] records operations as they execute; calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar with respect to every node.
//!
//! The tape is first order only. Where a second-order quantity is needed (the
//! critic input gradient inside the gradient penalty) the caller builds the
//! input gradient explicitly out of tape operations.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Unary {
    Gelu,
    Elu,
    Relu,
    Sigmoid,
    Silu,
    LeakyRelu(f64),
    Tanh,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let sg = sigmoid(x);
                sg + x * sg * (1.0 - sg)
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
        }
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

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    GroupMean(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    LayerNorm {
        x: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

/// Attention probabilities retained by the fused attention op, one
/// `queries x keys` matrix per (group, head), group-major.
pub struct AttentionProbs<'a> {
    pub heads: usize,
    pub probs: Ref<'a, [Mat]>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&self, value: Arc<Mat>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// A leaf holding `value`. Gradients flow to leaves but stop there.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf sharing storage with a parameter tensor.
    pub fn leaf_shared(&self, value: Arc<Mat>) -> Var {
        self.push_shared(value, Op::Leaf)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar_value on non-scalar node");
        val[[0, 0]]
    }

    fn unary_map(&self, a: Var, f: impl Fn(&Mat) -> Mat) -> Mat {
        f(&self.value(a))
    }

    fn binary_map(&self, a: Var, b: Var, f: impl Fn(&Mat, &Mat) -> Mat) -> Mat {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul shape mismatch");
            x.dot(y)
        });
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| {
            assert_eq!(x.ncols(), y.ncols(), "matmul_bt shape mismatch");
            x.dot(&y.t())
        });
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shape mismatch");
            x + y
        });
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "sub shape mismatch");
            x - y
        });
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary_map(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shape mismatch");
            x * y
        });
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = self.binary_map(a, row, |x, r| {
            assert_eq!(r.nrows(), 1, "add_row expects a single row");
            assert_eq!(x.ncols(), r.ncols(), "add_row width mismatch");
            x + r
        });
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `m x n` matrix by a `1 x n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let v = self.binary_map(a, row, |x, r| {
            assert_eq!(r.nrows(), 1, "mul_row expects a single row");
            assert_eq!(x.ncols(), r.ncols(), "mul_row width mismatch");
            x * r
        });
        self.push(v, Op::MulRow(a, row))
    }

    /// Multiplies every column of an `m x n` matrix by an `m x 1` column.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let v = self.binary_map(a, col, |x, c| {
            assert_eq!(c.ncols(), 1, "mul_col expects a single column");
            assert_eq!(x.nrows(), c.nrows(), "mul_col height mismatch");
            x * c
        });
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.unary_map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.unary_map(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn unary(&self, a: Var, f: Unary) -> Var {
        let v = self.unary_map(a, |x| x.mapv(|e| f.apply(e)));
        self.push(v, Op::Unary(a, f))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.unary_map(a, |x| Mat::from_elem((1, 1), x.sum()));
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.unary_map(a, |x| Mat::from_elem((1, 1), x.sum() / x.len() as f64));
        self.push(v, Op::Mean(a))
    }

    /// Per-row sum: `m x n -> m x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let v = self.unary_map(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)));
        self.push(v, Op::SumCols(a))
    }

    /// Mean over consecutive blocks of `group` rows: `(g·k) x n -> g x n`.
    pub fn group_mean(&self, a: Var, group: usize) -> Var {
        let v = self.unary_map(a, |x| {
            assert!(group > 0 && x.nrows() % group == 0, "group_mean: rows not divisible");
            let g = x.nrows() / group;
            let mut out = Mat::zeros((g, x.ncols()));
            for i in 0..g {
                let block = x.slice(s![i * group..(i + 1) * group, ..]);
                out.row_mut(i).assign(&block.mean_axis(Axis(0)).unwrap());
            }
            out
        });
        self.push(v, Op::GroupMean(a, group))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch")
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch")
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.unary_map(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.unary_map(a, |x| x.slice(s![start..start + len, ..]).to_owned());
        self.push(v, Op::SliceRows(a, start))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (xhat, inv_std) = {
            let x = self.value(a);
            let n = x.ncols() as f64;
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / n;
                row.mapv_inplace(|e| e - mean);
                let var = row.iter().map(|e| e * e).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|e| e * is);
                inv_std.push(is);
            }
            (xhat, inv_std)
        };
        let out = xhat.clone();
        self.push(
            out,
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax(&self, a: Var) -> Var {
        let v = self.unary_map(a, softmax_rows);
        self.push(v, Op::Softmax(a))
    }

    /// Mean softmax cross-entropy of `logits` (rows = samples) against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let (loss, probs) = {
            let x = self.value(logits);
            assert_eq!(x.nrows(), labels.len(), "cross_entropy: label count mismatch");
            let probs = softmax_rows(&x);
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                assert!(y < x.ncols(), "cross_entropy: label out of range");
                loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
            }
            (loss / labels.len() as f64, probs)
        };
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q` is `(groups·nq) x d`, `k` and `v` are `(groups·nk) x d`. Each group
    /// (one sample of a batch) attends only within itself; the `d` channels are
    /// split evenly into `heads`. Returns `(groups·nq) x d`.
    pub fn attention(&self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qm, km, vm) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let d = qm.ncols();
            assert!(heads > 0 && d % heads == 0, "attention: channels not divisible by heads");
            assert_eq!(km.ncols(), d, "attention: key width mismatch");
            assert_eq!(km.dim(), vm.dim(), "attention: key/value shape mismatch");
            assert!(qm.nrows() % groups == 0 && km.nrows() % groups == 0);
            let nq = qm.nrows() / groups;
            let nk = km.nrows() / groups;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Mat::zeros((qm.nrows(), d));
            let mut probs = Vec::with_capacity(groups * heads);
            for g in 0..groups {
                for h in 0..heads {
                    let qs = qm.slice(s![g * nq..(g + 1) * nq, h * dh..(h + 1) * dh]);
                    let ks = km.slice(s![g * nk..(g + 1) * nk, h * dh..(h + 1) * dh]);
                    let vs = vm.slice(s![g * nk..(g + 1) * nk, h * dh..(h + 1) * dh]);
                    let scores = qs.dot(&ks.t()) * scale;
                    let p = softmax_rows(&scores);
                    out.slice_mut(s![g * nq..(g + 1) * nq, h * dh..(h + 1) * dh])
                        .assign(&p.dot(&vs));
                    probs.push(p);
                }
            }
            (out, probs)
        };
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        )
    }

    /// Attention probabilities stored by an [`Tape::attention`] node.
    pub fn attention_probs(&self, node: Var) -> Option<AttentionProbs<'_>> {
        let nodes = self.nodes.borrow();
        let heads = match &nodes[node.0].op {
            Op::Attention { heads, .. } => *heads,
            _ => return None,
        };
        let probs = Ref::map(nodes, |n| match &n[node.0].op {
            Op::Attention { probs, .. } => probs.as_slice(),
            _ => unreachable!(),
        });
        Some(AttentionProbs { heads, probs })
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| nodes[v.0].value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulBT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * val(*r));
                    acc(&mut grads, *r, gr);
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g * val(*c));
                    acc(&mut grads, *c, gc);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Unary(a, f) => {
                    let x = val(*a);
                    let y = node.value.as_ref();
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d)
                        .and(x)
                        .and(y)
                        .for_each(|d, &x, &y| *d *= f.derivative(x, y));
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(val(*a).dim(), s));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = g[[0, 0]] / x.len() as f64;
                    acc(&mut grads, *a, Mat::from_elem(x.dim(), s));
                }
                Op::SumCols(a) => {
                    let x = val(*a);
                    let d = g.broadcast(x.dim()).unwrap().to_owned();
                    acc(&mut grads, *a, d);
                }
                Op::GroupMean(a, group) => {
                    let x = val(*a);
                    let mut d = Mat::zeros(x.dim());
                    let inv = 1.0 / *group as f64;
                    for i in 0..g.nrows() {
                        let row = g.row(i).mapv(|e| e * inv);
                        for r in i * group..(i + 1) * group {
                            d.row_mut(r).assign(&row);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
                    let n = xhat.ncols() as f64;
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let xr = xhat.row(i);
                        let mg = row.sum() / n;
                        let mgx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let is = inv_std[i];
                        for (e, &xh) in row.iter_mut().zip(xr.iter()) {
                            *e = is * (*e - mg - xh * mgx);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Softmax(a) => {
                    let p = node.value.as_ref();
                    let mut d = &g * p;
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let dot = row.sum();
                        for (e, &pe) in row.iter_mut().zip(p.row(i).iter()) {
                            *e -= pe * dot;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        d[[i, y]] -= 1.0;
                    }
                    d *= scale;
                    acc(&mut grads, *logits, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (val(*q), val(*k), val(*v));
                    let d = qm.ncols();
                    let nq = qm.nrows() / groups;
                    let nk = km.nrows() / groups;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qm.dim());
                    let mut dk = Mat::zeros(km.dim());
                    let mut dv = Mat::zeros(vm.dim());
                    for gi in 0..*groups {
                        for h in 0..*heads {
                            let p = &probs[gi * heads + h];
                            let rq = gi * nq..(gi + 1) * nq;
                            let rk = gi * nk..(gi + 1) * nk;
                            let cols = h * dh..(h + 1) * dh;
                            let go = g.slice(s![rq.clone(), cols.clone()]);
                            let qs = qm.slice(s![rq.clone(), cols.clone()]);
                            let ks = km.slice(s![rk.clone(), cols.clone()]);
                            let vs = vm.slice(s![rk.clone(), cols.clone()]);
                            dv.slice_mut(s![rk.clone(), cols.clone()])
                                .assign(&p.t().dot(&go));
                            let dp = go.dot(&vs.t());
                            let mut ds = &dp * p;
                            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                                let dot = row.sum();
                                for (e, &pe) in row.iter_mut().zip(p.row(i).iter()) {
                                    *e -= pe * dot;
                                }
                            }
                            ds *= scale;
                            dq.slice_mut(s![rq.clone(), cols.clone()]).assign(&ds.dot(&ks));
                            dk.slice_mut(s![rk, cols]).assign(&ds.t().dot(&qs));
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
        Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) for every input entry.
    fn check(inputs: Vec<Mat>, build: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&tape, &vars);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.dim());
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == i {
                                m.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.leaf(m)
                        })
                        .collect();
                    let o = build(&t, &vs);
                    t.scalar_value(o)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (1.0 + numeric.abs());
                assert!(err < 1e-6, "input {i} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, (3, 4));
        let b = random(&mut rng, (4, 2));
        let c = random(&mut rng, (3, 2));
        check(vec![a, b, c], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let p = t.mul(m, v[2]);
            let q = t.sub(p, v[2]);
            let r = t.add(q, m);
            t.sum(t.unary(r, Unary::Tanh))
        });
    }

    #[test]
    fn broadcast_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, (6, 3));
        let row = random(&mut rng, (1, 3));
        let col = random(&mut rng, (6, 1));
        check(vec![a, row, col], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let x = t.mul_row(x, v[1]);
            let x = t.mul_col(x, v[2]);
            let pooled = t.group_mean(x, 3);
            let sums = t.sum_cols(t.unary(pooled, Unary::Square));
            let sc = t.scale(t.add_scalar(sums, 0.5), 2.0);
            t.mean(sc)
        });
    }

    #[test]
    fn unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, (4, 5));
        for f in [
            Unary::Gelu,
            Unary::Elu,
            Unary::Sigmoid,
            Unary::Silu,
            Unary::LeakyRelu(0.2),
            Unary::Exp,
        ] {
            check(vec![a.clone()], |t, v| t.sum(t.unary(v[0], f)));
        }
        let pos = a.mapv(|x| x.abs() + 0.5);
        for f in [Unary::Sqrt, Unary::Log] {
            check(vec![pos.clone()], |t, v| t.sum(t.unary(v[0], f)));
        }
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, (4, 3));
        let b = random(&mut rng, (4, 2));
        let w = random(&mut rng, (5, 7));
        check(vec![a, b, w], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let r = t.concat_rows(&[c, t.slice_rows(c, 1, 2)]);
            let s = t.slice_cols(r, 1, 4);
            let prod = t.matmul_bt(s, t.slice_cols(v[2], 0, 4));
            t.sum(t.unary(prod, Unary::Sigmoid))
        });
    }

    #[test]
    fn normalization_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, (4, 6));
        let w = random(&mut rng, (4, 6));
        check(vec![a.clone(), w], |t, v| {
            let n = t.layer_norm(v[0], 1e-5);
            t.sum(t.mul(n, v[1]))
        });
        let w2 = random(&mut rng, (4, 6));
        check(vec![a.clone(), w2], |t, v| t.sum(t.mul(t.softmax(v[0]), v[1])));
        check(vec![a], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2]));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&mut rng, (6, 4));
        let k = random(&mut rng, (4, 4));
        let v = random(&mut rng, (4, 4));
        let w = random(&mut rng, (6, 4));
        check(vec![q, k, v, w], |t, x| {
            let o = t.attention(x[0], x[1], x[2], 2, 2);
            t.sum(t.mul(o, x[3]))
        });
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let q = tape.leaf(random(&mut rng, (10, 8)));
        let k = tape.leaf(random(&mut rng, (12, 8)));
        let out = tape.attention(q, k, k, 2, 4);
        let probs = tape.attention_probs(out).unwrap();
        assert_eq!(probs.probs.len(), 8);
        for p in probs.probs.iter() {
            assert_eq!(p.dim(), (5, 6));
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let x = tape.leaf(random(&mut rng, (5, 32)) * 7.0);
        let n = tape.layer_norm(x, 1e-12);
        for row in tape.value(n).rows() {
            let mean = row.sum() / 32.0;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((1, 1), 3.0));
        let y = tape.mul(x, x);
        let z = tape.add(y, x);
        let g = tape.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 7.0);
    }
}
