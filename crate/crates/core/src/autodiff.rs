//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Every vector-Jacobian product is written once against the [`Ops`] trait and
//! can therefore be executed in two ways:
//!
//! * on the [`Tape`] itself ([`Tape::grad_graph`]), which records the backward
//!   pass as new nodes so the result can be differentiated again. This is how
//!   spatial scores `∇ₓ log p` become differentiable functions of the flow
//!   parameters;
//! * eagerly ([`Tape::grad_values`]), which only produces numbers and is used
//!   for the final parameter gradient of a loss.
//!
//! Operations that cannot be expressed with the built-in primitives (pairwise
//! interaction sums, potential gradients) are plugged in through
//! [`CustomOp`]; their backward rule is itself a custom op.

use std::rc::Rc;

use crate::tensor::Mat;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose backward rule is provided as another op.
pub trait CustomOp {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Mat]) -> Mat;

    /// Operation computing the vector-Jacobian product with respect to input
    /// `input`. It is applied to `[inputs..., upstream_grad]`. `None` marks an
    /// input that is not differentiable.
    fn vjp_op(&self, input: usize) -> Option<Rc<dyn CustomOp>>;
}

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Abs,
    LeakyRelu(f64),
    MatMul { ta: bool, tb: bool },
    /// `N x c -> 1 x c`
    SumRows,
    /// `1 x c -> n x c`
    BcastRows(usize),
    /// `N x c -> N x 1`
    SumCols,
    /// `N x 1 -> N x c`
    BcastCols(usize),
    SliceCols { start: usize, len: usize },
    PadCols { start: usize, total: usize },
    Reshape { rows: usize, cols: usize },
    /// Row-wise gather: `out[i, j] = in[i, idx[i * m + j]]`.
    Gather(Rc<[usize]>),
    /// Adjoint of [`Op::Gather`], producing `cols` columns.
    Scatter(Rc<[usize]>, usize),
    /// Inclusive cumulative sum along each row.
    Cumsum,
    /// Reverse inclusive cumulative sum along each row.
    RevCumsum,
    Custom(Rc<dyn CustomOp>),
}

impl std::fmt::Debug for Op {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Op::Custom(c) => write!(f, "Custom({})", c.name()),
            Op::Gather(idx) => write!(f, "Gather({})", idx.len()),
            Op::Scatter(idx, c) => write!(f, "Scatter({}, {c})", idx.len()),
            Op::Leaf => write!(f, "Leaf"),
            Op::Add => write!(f, "Add"),
            Op::Sub => write!(f, "Sub"),
            Op::Mul => write!(f, "Mul"),
            Op::Div => write!(f, "Div"),
            Op::Neg => write!(f, "Neg"),
            Op::Scale(s) => write!(f, "Scale({s})"),
            Op::AddScalar(s) => write!(f, "AddScalar({s})"),
            Op::Exp => write!(f, "Exp"),
            Op::Log => write!(f, "Log"),
            Op::Tanh => write!(f, "Tanh"),
            Op::Sigmoid => write!(f, "Sigmoid"),
            Op::Softplus => write!(f, "Softplus"),
            Op::Sqrt => write!(f, "Sqrt"),
            Op::Abs => write!(f, "Abs"),
            Op::LeakyRelu(s) => write!(f, "LeakyRelu({s})"),
            Op::MatMul { ta, tb } => write!(f, "MatMul({ta}, {tb})"),
            Op::SumRows => write!(f, "SumRows"),
            Op::BcastRows(n) => write!(f, "BcastRows({n})"),
            Op::SumCols => write!(f, "SumCols"),
            Op::BcastCols(n) => write!(f, "BcastCols({n})"),
            Op::SliceCols { start, len } => write!(f, "SliceCols({start}, {len})"),
            Op::PadCols { start, total } => write!(f, "PadCols({start}, {total})"),
            Op::Reshape { rows, cols } => write!(f, "Reshape({rows}, {cols})"),
            Op::Cumsum => write!(f, "Cumsum"),
            Op::RevCumsum => write!(f, "RevCumsum"),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

/// Forward evaluation of a single op.
pub fn eval(op: &Op, x: &[&Mat]) -> Mat {
    match op {
        Op::Leaf => panic!("leaf nodes carry their own value"),
        Op::Add => x[0].add(x[1]),
        Op::Sub => x[0].sub(x[1]),
        Op::Mul => x[0].zip_map(x[1], |a, b| a * b),
        Op::Div => x[0].zip_map(x[1], |a, b| a / b),
        Op::Neg => x[0].map(|v| -v),
        Op::Scale(s) => x[0].scale(*s),
        Op::AddScalar(s) => x[0].map(|v| v + s),
        Op::Exp => x[0].map(f64::exp),
        Op::Log => x[0].map(f64::ln),
        Op::Tanh => x[0].map(f64::tanh),
        Op::Sigmoid => x[0].map(sigmoid),
        Op::Softplus => x[0].map(softplus),
        Op::Sqrt => x[0].map(f64::sqrt),
        Op::Abs => x[0].map(f64::abs),
        Op::LeakyRelu(s) => x[0].map(|v| if v >= 0.0 { v } else { s * v }),
        Op::MatMul { ta, tb } => Mat::matmul(x[0], *ta, x[1], *tb),
        Op::SumRows => x[0].sum_rows(),
        Op::BcastRows(n) => {
            assert_eq!(x[0].rows(), 1, "BcastRows expects a row vector");
            Mat::from_fn(*n, x[0].cols(), |_, c| x[0][(0, c)])
        }
        Op::SumCols => x[0].sum_cols(),
        Op::BcastCols(n) => {
            assert_eq!(x[0].cols(), 1, "BcastCols expects a column vector");
            Mat::from_fn(x[0].rows(), *n, |r, _| x[0][(r, 0)])
        }
        Op::SliceCols { start, len } => x[0].slice_cols(*start, *len),
        Op::PadCols { start, total } => x[0].pad_cols(*start, *total),
        Op::Reshape { rows, cols } => x[0].clone().reshape(*rows, *cols),
        Op::Gather(idx) => {
            let n = x[0].rows();
            let m = if n == 0 { 0 } else { idx.len() / n };
            Mat::from_fn(n, m, |r, j| x[0][(r, idx[r * m + j])])
        }
        Op::Scatter(idx, cols) => {
            let (n, m) = x[0].shape();
            let mut out = Mat::zeros(n, *cols);
            for r in 0..n {
                for j in 0..m {
                    out[(r, idx[r * m + j])] += x[0][(r, j)];
                }
            }
            out
        }
        Op::Cumsum => {
            let mut out = x[0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for c in 1..row.len() {
                    row[c] += row[c - 1];
                }
            }
            out
        }
        Op::RevCumsum => {
            let mut out = x[0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for c in (0..row.len().saturating_sub(1)).rev() {
                    row[c] += row[c + 1];
                }
            }
            out
        }
        Op::Custom(c) => c.forward(x),
    }
}

/// Builder interface shared by the recording tape and eager evaluation.
pub trait Ops {
    type V: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::V]) -> Self::V;

    fn constant(&mut self, m: Mat) -> Self::V;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Mat;

    fn shape(&self, v: &Self::V) -> (usize, usize) {
        self.value(v).shape()
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Op::Div, &[a, b])
    }
    fn neg(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Neg, &[a])
    }
    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V {
        self.apply(Op::Scale(s), &[a])
    }
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V {
        self.apply(Op::AddScalar(s), &[a])
    }
    fn exp(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Exp, &[a])
    }
    fn log(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Log, &[a])
    }
    fn tanh(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Sigmoid, &[a])
    }
    fn softplus(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Softplus, &[a])
    }
    fn sqrt(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Sqrt, &[a])
    }
    fn abs(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Abs, &[a])
    }
    fn leaky_relu(&mut self, a: &Self::V, slope: f64) -> Self::V {
        self.apply(Op::LeakyRelu(slope), &[a])
    }
    fn square(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Mul, &[a, a])
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        self.apply(Op::MatMul { ta: false, tb: false }, &[a, b])
    }
    fn matmul_t(&mut self, a: &Self::V, ta: bool, b: &Self::V, tb: bool) -> Self::V {
        self.apply(Op::MatMul { ta, tb }, &[a, b])
    }
    fn sum_rows(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::SumRows, &[a])
    }
    fn sum_cols(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::SumCols, &[a])
    }
    fn bcast_rows(&mut self, a: &Self::V, n: usize) -> Self::V {
        self.apply(Op::BcastRows(n), &[a])
    }
    fn bcast_cols(&mut self, a: &Self::V, n: usize) -> Self::V {
        self.apply(Op::BcastCols(n), &[a])
    }
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V {
        self.apply(Op::SliceCols { start, len }, &[a])
    }
    fn pad_cols(&mut self, a: &Self::V, start: usize, total: usize) -> Self::V {
        self.apply(Op::PadCols { start, total }, &[a])
    }
    fn reshape(&mut self, a: &Self::V, rows: usize, cols: usize) -> Self::V {
        self.apply(Op::Reshape { rows, cols }, &[a])
    }
    fn gather(&mut self, a: &Self::V, idx: Rc<[usize]>) -> Self::V {
        self.apply(Op::Gather(idx), &[a])
    }
    fn cumsum(&mut self, a: &Self::V) -> Self::V {
        self.apply(Op::Cumsum, &[a])
    }
    fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[&Self::V]) -> Self::V {
        self.apply(Op::Custom(op), inputs)
    }

    /// Sum of all entries as a `1 x 1` node.
    fn sum_all(&mut self, a: &Self::V) -> Self::V {
        let r = self.sum_rows(a);
        self.sum_cols(&r)
    }
    /// Mean of all entries as a `1 x 1` node.
    fn mean_all(&mut self, a: &Self::V) -> Self::V {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }
    /// Broadcasts a `1 x 1` node to `rows x cols`.
    fn bcast_scalar(&mut self, s: &Self::V, rows: usize, cols: usize) -> Self::V {
        let r = self.bcast_rows(s, rows);
        self.bcast_cols(&r, cols)
    }
    /// Multiplies every column of `a` by the column vector `col`.
    fn mul_col(&mut self, a: &Self::V, col: &Self::V) -> Self::V {
        let c = self.shape(a).1;
        let b = self.bcast_cols(col, c);
        self.mul(a, &b)
    }
    /// Adds the row vector `row` to every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V {
        let n = self.shape(a).0;
        let b = self.bcast_rows(row, n);
        self.add(a, &b)
    }
    /// Row-wise squared Euclidean norms, `N x c -> N x 1`.
    fn row_sq_norms(&mut self, a: &Self::V) -> Self::V {
        let sq = self.square(a);
        self.sum_cols(&sq)
    }
}

/// Vector-Jacobian products for every op, generic over the execution mode.
fn vjp<O: Ops>(
    o: &mut O,
    op: &Op,
    x: &[O::V],
    out: &O::V,
    g: &O::V,
    need: &[bool],
) -> Vec<Option<O::V>> {
    let one = |v: O::V| vec![Some(v)];
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), need[1].then(|| o.neg(g))],
        Op::Mul => vec![
            need[0].then(|| o.mul(g, &x[1])),
            need[1].then(|| o.mul(g, &x[0])),
        ],
        Op::Div => {
            let ga = o.div(g, &x[1]);
            let gb = need[1].then(|| {
                let t = o.mul(&ga, out);
                o.neg(&t)
            });
            vec![Some(ga), gb]
        }
        Op::Neg => one(o.neg(g)),
        Op::Scale(s) => one(o.scale(g, *s)),
        Op::AddScalar(_) => one(g.clone()),
        Op::Exp => one(o.mul(g, out)),
        Op::Log => one(o.div(g, &x[0])),
        Op::Tanh => {
            let sq = o.square(out);
            let t = o.mul(g, &sq);
            one(o.sub(g, &t))
        }
        Op::Sigmoid => {
            let one_minus = {
                let n = o.neg(out);
                o.add_scalar(&n, 1.0)
            };
            let d = o.mul(out, &one_minus);
            one(o.mul(g, &d))
        }
        Op::Softplus => {
            let s = o.sigmoid(&x[0]);
            one(o.mul(g, &s))
        }
        Op::Sqrt => {
            let t = o.div(g, out);
            one(o.scale(&t, 0.5))
        }
        Op::Abs => {
            let sign = o.value(&x[0]).map(f64::signum);
            let s = o.constant(sign);
            one(o.mul(g, &s))
        }
        Op::LeakyRelu(slope) => {
            let slope = *slope;
            let mask = o.value(&x[0]).map(|v| if v >= 0.0 { 1.0 } else { slope });
            let m = o.constant(mask);
            one(o.mul(g, &m))
        }
        Op::MatMul { ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let ga = need[0].then(|| {
                if ta {
                    o.matmul_t(&x[1], tb, g, true)
                } else {
                    o.matmul_t(g, false, &x[1], !tb)
                }
            });
            let gb = need[1].then(|| {
                if tb {
                    o.matmul_t(g, true, &x[0], ta)
                } else {
                    o.matmul_t(&x[0], !ta, g, false)
                }
            });
            vec![ga, gb]
        }
        Op::SumRows => {
            let n = o.shape(&x[0]).0;
            one(o.bcast_rows(g, n))
        }
        Op::BcastRows(_) => one(o.sum_rows(g)),
        Op::SumCols => {
            let c = o.shape(&x[0]).1;
            one(o.bcast_cols(g, c))
        }
        Op::BcastCols(_) => one(o.sum_cols(g)),
        Op::SliceCols { start, .. } => {
            let total = o.shape(&x[0]).1;
            one(o.pad_cols(g, *start, total))
        }
        Op::PadCols { start, .. } => {
            let len = o.shape(&x[0]).1;
            one(o.slice_cols(g, *start, len))
        }
        Op::Reshape { .. } => {
            let (r, c) = o.shape(&x[0]);
            one(o.reshape(g, r, c))
        }
        Op::Gather(idx) => {
            let c = o.shape(&x[0]).1;
            one(o.apply(Op::Scatter(idx.clone(), c), &[g]))
        }
        Op::Scatter(idx, _) => one(o.apply(Op::Gather(idx.clone()), &[g])),
        Op::Cumsum => one(o.apply(Op::RevCumsum, &[g])),
        Op::RevCumsum => one(o.apply(Op::Cumsum, &[g])),
        Op::Custom(c) => {
            let mut args: Vec<&O::V> = x.iter().collect();
            args.push(g);
            (0..x.len())
                .map(|i| {
                    if !need[i] {
                        return None;
                    }
                    let rule = c.vjp_op(i).unwrap_or_else(|| {
                        panic!("custom op `{}` is not differentiable in input {i}", c.name())
                    });
                    Some(o.apply(Op::Custom(rule), &args))
                })
                .collect()
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Mat>,
}

/// Records operations for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf node; parameters and constants are both leaves.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Rc::new(m),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn val_rc(&self, v: Var) -> Rc<Mat> {
        self.nodes[v.0].value.clone()
    }

    /// A constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Marks nodes in `lo..=hi` that depend on any of `wrt`.
    fn cone(&self, wrt: &[Var], lo: usize, hi: usize) -> Vec<bool> {
        let mut in_cone = vec![false; hi + 1 - lo];
        for w in wrt {
            in_cone[w.0 - lo] = true;
        }
        for i in lo..=hi {
            if in_cone[i - lo] {
                continue;
            }
            in_cone[i - lo] = self.nodes[i]
                .inputs
                .iter()
                .any(|&j| j >= lo && in_cone[j - lo]);
        }
        in_cone
    }

    /// Differentiates `Σ_r ⟨seed_r, root_r⟩` with respect to `wrt`, recording
    /// the backward pass on the tape so the results are themselves
    /// differentiable. Inputs that do not influence the roots get zeros.
    pub fn grad_graph(&mut self, roots: &[Var], seeds: &[Var], wrt: &[Var]) -> Vec<Var> {
        assert_eq!(roots.len(), seeds.len(), "one seed per root");
        let lo = wrt.iter().map(|w| w.0).min().expect("empty wrt");
        let hi = roots.iter().map(|r| r.0).max().expect("empty roots");
        if hi < lo {
            return wrt
                .iter()
                .map(|w| {
                    let (r, c) = self.val(*w).shape();
                    self.leaf(Mat::zeros(r, c))
                })
                .collect();
        }
        let in_cone = self.cone(wrt, lo, hi);
        let mut adj: Vec<Option<Var>> = vec![None; hi + 1 - lo];
        for (r, s) in roots.iter().zip(seeds) {
            if r.0 < lo || !in_cone[r.0 - lo] {
                continue;
            }
            let slot = &mut adj[r.0 - lo];
            *slot = Some(match *slot {
                Some(prev) => self.add(&prev, s),
                None => *s,
            });
        }
        for i in (lo..=hi).rev() {
            if !in_cone[i - lo] {
                continue;
            }
            let Some(g) = adj[i - lo] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs
                .iter()
                .map(|&j| j >= lo && in_cone[j - lo])
                .collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let x: Vec<Var> = inputs.iter().map(|&j| Var(j)).collect();
            let grads = vjp(self, &op, &x, &Var(i), &g, &need);
            for ((j, gj), needed) in inputs.iter().zip(grads).zip(&need) {
                if !needed {
                    continue;
                }
                let Some(gj) = gj else { continue };
                let slot = j - lo;
                adj[slot] = Some(match adj[slot] {
                    Some(prev) => self.add(&prev, &gj),
                    None => gj,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj[w.0 - lo] {
                Some(g) => g,
                None => {
                    let (r, c) = self.val(*w).shape();
                    self.leaf(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    /// Numeric gradient of the scalar `root` with respect to `wrt`.
    pub fn grad_values(&self, root: Var, wrt: &[Var]) -> Vec<Mat> {
        assert_eq!(self.val(root).shape(), (1, 1), "root must be a scalar");
        let lo = wrt.iter().map(|w| w.0).min().expect("empty wrt");
        let hi = root.0;
        let zeros = |t: &Self| -> Vec<Mat> {
            wrt.iter()
                .map(|w| {
                    let (r, c) = t.val(*w).shape();
                    Mat::zeros(r, c)
                })
                .collect()
        };
        if hi < lo {
            return zeros(self);
        }
        let in_cone = self.cone(wrt, lo, hi);
        let mut adj: Vec<Option<Rc<Mat>>> = vec![None; hi + 1 - lo];
        if in_cone[hi - lo] {
            adj[hi - lo] = Some(Rc::new(Mat::scalar(1.0)));
        }
        let wrt_slots: std::collections::HashSet<usize> = wrt.iter().map(|w| w.0).collect();
        let mut eager = Eager;
        for i in (lo..=hi).rev() {
            if !in_cone[i - lo] {
                continue;
            }
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let g = if wrt_slots.contains(&i) {
                adj[i - lo].clone()
            } else {
                adj[i - lo].take()
            };
            let Some(g) = g else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| j >= lo && in_cone[j - lo])
                .collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let x: Vec<Rc<Mat>> = node.inputs.iter().map(|&j| self.nodes[j].value.clone()).collect();
            let grads = vjp(&mut eager, &node.op, &x, &node.value, &g, &need);
            for ((&j, gj), needed) in node.inputs.iter().zip(grads).zip(&need) {
                if !needed {
                    continue;
                }
                let Some(gj) = gj else { continue };
                let slot = &mut adj[j - lo];
                *slot = Some(match slot.take() {
                    Some(prev) => {
                        let mut acc = Rc::try_unwrap(prev).unwrap_or_else(|rc| (*rc).clone());
                        acc.add_assign(&gj);
                        Rc::new(acc)
                    }
                    None => gj,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj[w.0 - lo].take() {
                Some(g) => Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()),
                None => {
                    let (r, c) = self.val(*w).shape();
                    Mat::zeros(r, c)
                }
            })
            .collect()
    }
}

impl Ops for Tape {
    type V = Var;

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Var {
        let value = {
            let vals: Vec<&Mat> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            eval(&op, &vals)
        };
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: Rc::new(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn constant(&mut self, m: Mat) -> Var {
        self.leaf(m)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Mat {
        &self.nodes[v.0].value
    }
}

/// Immediate evaluation without recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Rc<Mat>;

    fn apply(&mut self, op: Op, inputs: &[&Rc<Mat>]) -> Rc<Mat> {
        let vals: Vec<&Mat> = inputs.iter().map(|v| &***v).collect();
        Rc::new(eval(&op, &vals))
    }

    fn constant(&mut self, m: Mat) -> Rc<Mat> {
        Rc::new(m)
    }

    fn value<'a>(&'a self, v: &'a Rc<Mat>) -> &'a Mat {
        v
    }
}
