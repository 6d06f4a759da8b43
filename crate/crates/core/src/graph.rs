//! Reverse-mode automatic differentiation over a flat tape of matrix ops.
//!
//! A forward pass appends nodes to the tape; `backward` walks it in reverse
//! and accumulates gradients for every parameter leaf. Parameter leaves are
//! memoized per graph, so a batch of sequences evaluated in one graph shares
//! leaves and their gradients sum naturally. Evaluation order is fixed by
//! construction, which keeps f64 results bit-reproducible.

use crate::mat::{matmul, matmul_a_bt_into, matmul_at_b_into, matmul_into, Mat};
use crate::params::ParamSet;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SELU_LAMBDA: f64 = 1.0507009873554805;
const SELU_ALPHA: f64 = 1.6732632423543772;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(u64, usize),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Selu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Transpose(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    /// Pairwise rotation by per-(row, pair) angles with a per-(row, pair)
    /// magnitude, used for the positional encoding on attention queries and
    /// keys. `cos`, `sin`, `scale` are [rows, cols/2] constants.
    Rotary { x: NodeId, cos: Mat, sin: Mat, scale: Mat },
    SumAll(NodeId),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_memo: HashMap<(u64, usize), NodeId>,
}

/// Per-parameter gradients produced by `Graph::backward`, keyed by
/// (parameter-set id, index). Ordered storage keeps every reduction over
/// the map (norms, accumulation) deterministic.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    by_param: BTreeMap<(u64, usize), Mat>,
}

impl GradMap {
    pub fn get(&self, params: &ParamSet, index: usize) -> Option<&Mat> {
        self.by_param.get(&(params.set_id(), index))
    }

    /// Sum another gradient map into this one.
    pub fn accumulate(&mut self, other: &GradMap) {
        for (&p, g) in &other.by_param {
            match self.by_param.get_mut(&p) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_param.insert(p, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.by_param.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Mat>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf through which no gradient flows.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// A parameter leaf; repeated calls for the same parameter return the
    /// same node so gradients accumulate across every use in the graph.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> NodeId {
        let key = (params.set_id(), index);
        if let Some(&id) = self.param_memo.get(&key) {
            return id;
        }
        let id = self.push_arc(params.value_arc(index), Op::Param(key.0, key.1));
        self.param_memo.insert(key, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    /// `[r, c] + [1, c]`, broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vv.cols(), "add_row width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vv.row(0)) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, v))
    }

    /// `[r, c] * [1, c]`, broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(va.cols(), vv.cols(), "mul_row width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(vv.row(0)) {
                *x *= y;
            }
        }
        self.push(value, Op::MulRow(a, v))
    }

    /// `[r, c] * [r, 1]`, broadcast over columns.
    pub fn mul_col(&mut self, a: NodeId, u: NodeId) -> NodeId {
        let (va, vu) = (self.value(a), self.value(u));
        assert_eq!(vu.cols(), 1, "mul_col expects a column vector");
        assert_eq!(va.rows(), vu.rows(), "mul_col height mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            let s = vu.at(r, 0);
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        self.push(value, Op::MulCol(a, u))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn selu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(selu);
        self.push(value, Op::Selu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part;
    /// modulation supplies scale and shift).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let (mean, rstd) = row_mean_rstd(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
        }
        self.push(value, Op::LayerNormRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let mut value = Mat::zeros(len, va.cols());
        for r in 0..len {
            value.row_mut(r).copy_from_slice(va.row(start + r));
        }
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Rotate adjacent column pairs of `x` by per-(row, pair) angles and
    /// multiply by a per-(row, pair) magnitude.
    pub fn rotary(&mut self, x: NodeId, cos: Mat, sin: Mat, scale: Mat) -> NodeId {
        let vx = self.value(x);
        let pairs = vx.cols() / 2;
        assert_eq!(vx.cols() % 2, 0, "rotary needs an even number of columns");
        assert_eq!(cos.shape(), (vx.rows(), pairs), "rotary cos shape");
        assert_eq!(sin.shape(), (vx.rows(), pairs), "rotary sin shape");
        assert_eq!(scale.shape(), (vx.rows(), pairs), "rotary scale shape");
        let mut value = Mat::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            for i in 0..pairs {
                let (c, s, m) = (cos.at(r, i), sin.at(r, i), scale.at(r, i));
                let x0 = vx.at(r, 2 * i);
                let x1 = vx.at(r, 2 * i + 1);
                value.set(r, 2 * i, (x0 * c - x1 * s) * m);
                value.set(r, 2 * i + 1, (x0 * s + x1 * c) * m);
            }
        }
        self.push(value, Op::Rotary { x, cos, sin, scale })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![total]), Op::SumAll(a))
    }

    /// Reverse pass from a scalar loss node; returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&mut self, loss: NodeId) -> GradMap {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        let mut out = GradMap::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            // Ops only reference earlier nodes, so `split_at_mut` views are
            // never needed: we read values immutably and write grads by index.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant => {}
                Op::Param(set, p) => match out.by_param.get_mut(&(set, p)) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert((set, p), g);
                    }
                },
                Op::Matmul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = grad_slot(&mut grads, a, va);
                    matmul_a_bt_into(&g, vb, &mut da, true);
                    put(&mut grads, a, da);
                    let mut db = grad_slot(&mut grads, b, va).reshape_like(vb);
                    matmul_at_b_into(va, &g, &mut db, true);
                    put(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, a, &g);
                    add_grad(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, a, &g);
                    let neg = g.map(|x| -x);
                    add_grad(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = {
                        let vb = &self.nodes[b.0].value;
                        elementwise_product(&g, vb)
                    };
                    add_grad(&mut grads, a, &da);
                    let db = {
                        let va = &self.nodes[a.0].value;
                        elementwise_product(&g, va)
                    };
                    add_grad(&mut grads, b, &db);
                }
                Op::AddRow(a, v) => {
                    add_grad(&mut grads, a, &g);
                    let mut dv = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in dv.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    add_grad(&mut grads, v, &dv);
                }
                Op::MulRow(a, v) => {
                    let (va, vv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    let mut dv = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gx = g.at(r, c);
                            da.set(r, c, gx * vv.at(0, c));
                            dv.set(0, c, dv.at(0, c) + gx * va.at(r, c));
                        }
                    }
                    add_grad(&mut grads, a, &da);
                    add_grad(&mut grads, v, &dv);
                }
                Op::MulCol(a, u) => {
                    let (va, vu) = (&self.nodes[a.0].value, &self.nodes[u.0].value);
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    let mut du = Mat::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let s = vu.at(r, 0);
                        let mut acc = 0.0;
                        for c in 0..g.cols() {
                            let gx = g.at(r, c);
                            da.set(r, c, gx * s);
                            acc += gx * va.at(r, c);
                        }
                        du.set(r, 0, acc);
                    }
                    add_grad(&mut grads, a, &da);
                    add_grad(&mut grads, u, &du);
                }
                Op::Scale(a, s) => {
                    let da = g.map(|x| x * s);
                    add_grad(&mut grads, a, &da);
                }
                Op::Selu(a) => {
                    let va = &self.nodes[a.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gx, &x)| gx * selu_derivative(x))
                        .collect();
                    let da = Mat::from_vec(g.rows(), g.cols(), data);
                    add_grad(&mut grads, a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gx, yx)| gx * yx).sum();
                        for c in 0..g.cols() {
                            da.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    add_grad(&mut grads, a, &da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols() {
                            da.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                        }
                    }
                    add_grad(&mut grads, a, &da);
                }
                Op::LayerNormRows(a) => {
                    let va = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let n = g.cols() as f64;
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (_, rstd) = row_mean_rstd(va.row(r));
                        let gmean: f64 = g.row(r).iter().sum::<f64>() / n;
                        let gy_mean: f64 =
                            g.row(r).iter().zip(y.row(r)).map(|(gx, yx)| gx * yx).sum::<f64>() / n;
                        for c in 0..g.cols() {
                            let v = rstd * (g.at(r, c) - gmean - y.at(r, c) * gy_mean);
                            da.set(r, c, v);
                        }
                    }
                    add_grad(&mut grads, a, &da);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    add_grad(&mut grads, a, &da);
                }
                Op::SliceRows(a, start) => {
                    let va_shape = self.nodes[a.0].value.shape();
                    let mut da = Mat::zeros(va_shape.0, va_shape.1);
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    add_grad(&mut grads, a, &da);
                }
                Op::SliceCols(a, start) => {
                    let va_shape = self.nodes[a.0].value.shape();
                    let mut da = Mat::zeros(va_shape.0, va_shape.1);
                    for r in 0..g.rows() {
                        da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    add_grad(&mut grads, a, &da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut dp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        add_grad(&mut grads, p, &dp);
                        offset += w;
                    }
                }
                Op::Rotary { x, cos, sin, scale } => {
                    let pairs = g.cols() / 2;
                    let mut dx = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        for i in 0..pairs {
                            let (c, s, m) = (cos.at(r, i), sin.at(r, i), scale.at(r, i));
                            let g0 = g.at(r, 2 * i);
                            let g1 = g.at(r, 2 * i + 1);
                            dx.set(r, 2 * i, (g0 * c + g1 * s) * m);
                            dx.set(r, 2 * i + 1, (-g0 * s + g1 * c) * m);
                        }
                    }
                    add_grad(&mut grads, x, &dx);
                }
                Op::SumAll(a) => {
                    let va_shape = self.nodes[a.0].value.shape();
                    let da = Mat::filled(va_shape.0, va_shape.1, g.at(0, 0));
                    add_grad(&mut grads, a, &da);
                }
            }
        }
        out
    }
}

trait ReshapeLike {
    fn reshape_like(self, like: &Mat) -> Mat;
}

impl ReshapeLike for Mat {
    fn reshape_like(self, like: &Mat) -> Mat {
        if self.shape() == like.shape() {
            self
        } else {
            Mat::zeros(like.rows(), like.cols())
        }
    }
}

fn grad_slot(grads: &mut [Option<Mat>], id: NodeId, like: &Mat) -> Mat {
    grads[id.0].take().unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
}

fn put(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    grads[id.0] = Some(g);
}

fn add_grad(grads: &mut [Option<Mat>], id: NodeId, delta: &Mat) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(delta),
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn elementwise_product(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Max-shifted softmax on a slice. Entries that underflow to zero stay
/// exactly zero, which the attention mask relies on.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn row_mean_rstd(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Re-exported for samplers that need a plain (non-tracked) matmul.
pub fn matmul_plain(a: &Mat, b: &Mat, out: &mut Mat) {
    matmul_into(a, b, out, false);
}
