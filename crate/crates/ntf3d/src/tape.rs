//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Every network, loss, and the renderer in this crate is expressed as
//! eager operations recorded on a [`Graph`]. `backward` then fills
//! gradients for every recorded node. Keeping the engine small and
//! f64-only makes finite-difference verification of every gradient path
//! practical.
//!
//! ```
//! use ntf3d::tape::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::row(vec![0.3, -1.2]));
//! let y = g.tanh(x);
//! let s = g.sum_all(y);
//! let grads = g.backward(s);
//! for (xi, gi) in g.value(x).data.clone().iter().zip(&grads[x].data) {
//!     assert!((gi - (1.0 - xi.tanh().powi(2))).abs() < 1e-12);
//! }
//! ```
//!
//! The R1 gradient penalty needs the discriminator's input gradient as a
//! *differentiable* quantity. Rather than generic double backward, the
//! discriminators build their input-gradient chain explicitly out of tape
//! operations (`MatMulNT`, elementwise activation derivatives,
//! `ScatterRows`), after which ordinary reverse mode differentiates the
//! penalty with respect to parameters.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn from_vec(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Tensor { data, rows, cols }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { data: vec![v], rows: 1, cols: 1 }
    }

    pub fn row(data: Vec<f64>) -> Self {
        let c = data.len();
        Tensor { data, rows: 1, cols: c }
    }

    pub fn col(data: Vec<f64>) -> Self {
        let r = data.len();
        Tensor { data, rows: r, cols: 1 }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type NodeId = usize;

/// Barycentric interpolation map: each output row is a convex combination
/// of three source rows (triangle corners). Fixed per draw, so it acts as
/// a constant linear operator on vertex attributes.
#[derive(Debug)]
pub struct BaryMap {
    /// (v0, v1, v2, w0, w1, w2) per output row.
    pub entries: Vec<(usize, usize, usize, f64, f64, f64)>,
    pub source_rows: usize,
}

/// Saved forward state for the point-splat rasterizer.
#[derive(Debug)]
pub struct SplatCtx {
    pub res: usize,
    pub kernel_sigma: f64,
    pub depth_temp: f64,
    pub depth_ref: f64,
    pub background: [f64; 3],
    pub bg_weight: f64,
    /// Per-pixel total splat weight, filled during forward.
    pub weight_sum: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    // the constant is kept for Debug output even though backward is the
    // identity in it
    AddScalarC(NodeId, #[allow(dead_code)] f64),
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulNT(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    RepeatRow(NodeId, usize),
    MulColBroadcast(NodeId, NodeId),
    MulScalarNode(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowDot(NodeId, NodeId),
    L2NormRows(NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    LogSumExpRows(NodeId),
    DiagCol(NodeId),
    MaxRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Rc<Vec<usize>>, #[allow(dead_code)] usize),
    MaxAll(NodeId, usize),
    BaryInterp(NodeId, Rc<BaryMap>),
    /// (xy, depth, colors) -> [H*W x 4] (rgb + silhouette)
    Splat(NodeId, NodeId, NodeId, Rc<SplatCtx>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eager computation graph. Values are computed when ops are recorded;
/// `backward` fills the gradient of a scalar root with respect to every
/// node.
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
fn softplus_stable(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId) {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "shape mismatch");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b);
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
            Tensor::from_vec(data, ta.rows, ta.cols)
        };
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b);
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
            Tensor::from_vec(data, ta.rows, ta.cols)
        };
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b);
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
            Tensor::from_vec(data, ta.rows, ta.cols)
        };
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b);
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
            Tensor::from_vec(data, ta.rows, ta.cols)
        };
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| -x).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x * c).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x + c).collect(), ta.rows, ta.cols)
        };
        self.push(Op::AddScalarC(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(ta.cols, tb.rows, "matmul inner dim mismatch");
            let mut out = Tensor::zeros(ta.rows, tb.cols);
            for i in 0..ta.rows {
                for k in 0..ta.cols {
                    let av = ta.get(i, k);
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..tb.cols {
                        out.data[i * tb.cols + j] += av * tb.get(k, j);
                    }
                }
            }
            out
        };
        self.push(Op::MatMul(a, b), v)
    }

    /// a [r x k] * b^T where b is [c x k]; result [r x c].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(ta.cols, tb.cols, "matmul_nt inner dim mismatch");
            let mut out = Tensor::zeros(ta.rows, tb.rows);
            for i in 0..ta.rows {
                for j in 0..tb.rows {
                    let mut s = 0.0;
                    for k in 0..ta.cols {
                        s += ta.get(i, k) * tb.get(j, k);
                    }
                    out.data[i * tb.rows + j] = s;
                }
            }
            out
        };
        self.push(Op::MatMulNT(a, b), v)
    }

    /// Broadcast-add a [1 x c] row to every row of a [r x c] matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = {
            let (ta, tr) = (&self.nodes[a].value, &self.nodes[row].value);
            assert_eq!(tr.rows, 1);
            assert_eq!(ta.cols, tr.cols);
            let mut out = ta.clone();
            for i in 0..ta.rows {
                for j in 0..ta.cols {
                    out.data[i * ta.cols + j] += tr.data[j];
                }
            }
            out
        };
        self.push(Op::AddRow(a, row), v)
    }

    pub fn repeat_row(&mut self, row: NodeId, n: usize) -> NodeId {
        let v = {
            let tr = &self.nodes[row].value;
            assert_eq!(tr.rows, 1);
            let mut data = Vec::with_capacity(n * tr.cols);
            for _ in 0..n {
                data.extend_from_slice(&tr.data);
            }
            Tensor::from_vec(data, n, tr.cols)
        };
        self.push(Op::RepeatRow(row, n), v)
    }

    /// Multiply every row of a [r x c] by the matching entry of col [r x 1].
    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = {
            let (ta, tc) = (&self.nodes[a].value, &self.nodes[col].value);
            assert_eq!(tc.cols, 1);
            assert_eq!(ta.rows, tc.rows);
            let mut out = ta.clone();
            for i in 0..ta.rows {
                for j in 0..ta.cols {
                    out.data[i * ta.cols + j] *= tc.data[i];
                }
            }
            out
        };
        self.push(Op::MulColBroadcast(a, col), v)
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let v = {
            let (ta, ts) = (&self.nodes[a].value, &self.nodes[s].value);
            assert_eq!(ts.len(), 1);
            let sv = ts.data[0];
            Tensor::from_vec(ta.data.iter().map(|x| x * sv).collect(), ta.rows, ta.cols)
        };
        self.push(Op::MulScalarNode(a, s), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x.tanh()).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| sigmoid_stable(*x)).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| softplus_stable(*x)).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x.exp()).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x.ln()).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| x.sqrt()).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            Tensor::from_vec(ta.data.iter().map(|x| 1.0 / x).collect(), ta.rows, ta.cols)
        };
        self.push(Op::Recip(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let s: f64 = ta.data.iter().sum();
        let n = ta.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s / n))
    }

    /// Row-wise dot product of two [r x c] matrices -> [r x 1].
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b);
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            let mut out = Tensor::zeros(ta.rows, 1);
            for i in 0..ta.rows {
                let mut s = 0.0;
                for j in 0..ta.cols {
                    s += ta.get(i, j) * tb.get(i, j);
                }
                out.data[i] = s;
            }
            out
        };
        self.push(Op::RowDot(a, b), v)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            let mut out = ta.clone();
            for i in 0..ta.rows {
                let row = &ta.data[i * ta.cols..(i + 1) * ta.cols];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                for j in 0..ta.cols {
                    out.data[i * ta.cols + j] = row[j] / norm;
                }
            }
            out
        };
        self.push(Op::L2NormRows(a), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
            assert_eq!(ta.rows, tb.rows);
            let cols = ta.cols + tb.cols;
            let mut out = Tensor::zeros(ta.rows, cols);
            for i in 0..ta.rows {
                out.data[i * cols..i * cols + ta.cols]
                    .copy_from_slice(&ta.data[i * ta.cols..(i + 1) * ta.cols]);
                out.data[i * cols + ta.cols..(i + 1) * cols]
                    .copy_from_slice(&tb.data[i * tb.cols..(i + 1) * tb.cols]);
            }
            out
        };
        self.push(Op::ConcatCols(a, b), v)
    }

    /// Stack single-row nodes of equal width into one [n x c] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        let v = {
            assert!(!rows.is_empty());
            let cols = self.nodes[rows[0]].value.cols;
            let mut out = Tensor::zeros(rows.len(), cols);
            for (i, &r) in rows.iter().enumerate() {
                let tr = &self.nodes[r].value;
                assert_eq!(tr.rows, 1);
                assert_eq!(tr.cols, cols);
                out.data[i * cols..(i + 1) * cols].copy_from_slice(&tr.data);
            }
            out
        };
        self.push(Op::StackRows(rows.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            assert!(start + len <= ta.cols);
            let mut out = Tensor::zeros(ta.rows, len);
            for i in 0..ta.rows {
                out.data[i * len..(i + 1) * len]
                    .copy_from_slice(&ta.data[i * ta.cols + start..i * ta.cols + start + len]);
            }
            out
        };
        self.push(Op::SliceCols(a, start, len), v)
    }

    /// Row-major reinterpretation of the same data.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            assert_eq!(ta.len(), rows * cols, "reshape size mismatch");
            Tensor::from_vec(ta.data.clone(), rows, cols)
        };
        self.push(Op::Reshape(a), v)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            let mut out = Tensor::zeros(ta.rows, 1);
            for i in 0..ta.rows {
                let row = &ta.data[i * ta.cols..(i + 1) * ta.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
                out.data[i] = m + s.ln();
            }
            out
        };
        self.push(Op::LogSumExpRows(a), v)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag_col(&mut self, a: NodeId) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            assert_eq!(ta.rows, ta.cols);
            Tensor::col((0..ta.rows).map(|i| ta.get(i, i)).collect())
        };
        self.push(Op::DiagCol(a), v)
    }

    /// Column-wise max over rows: [r x c] -> [1 x c].
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let (v, argmax) = {
            let ta = &self.nodes[a].value;
            let mut out = Tensor::zeros(1, ta.cols);
            let mut argmax = vec![0usize; ta.cols];
            for j in 0..ta.cols {
                let mut best = f64::NEG_INFINITY;
                for i in 0..ta.rows {
                    let x = ta.get(i, j);
                    if x > best {
                        best = x;
                        argmax[j] = i;
                    }
                }
                out.data[j] = best;
            }
            (out, argmax)
        };
        self.push(Op::MaxRows(a, argmax), v)
    }

    /// Argmax rows of the last `max_rows` call on `a`'s value; exposed so
    /// the analytic discriminator-gradient chain can reuse them.
    pub fn max_rows_with_argmax(&mut self, a: NodeId) -> (NodeId, Rc<Vec<usize>>) {
        let id = self.max_rows(a);
        let argmax = match &self.nodes[id].op {
            Op::MaxRows(_, am) => Rc::new(am.clone()),
            _ => unreachable!(),
        };
        (id, argmax)
    }

    /// Place a [1 x c] row into a zero [rows x c] matrix with per-column
    /// destination rows. Adjoint of routing gradients through a row max.
    pub fn scatter_rows(&mut self, src: NodeId, idx: Rc<Vec<usize>>, rows: usize) -> NodeId {
        let v = {
            let ts = &self.nodes[src].value;
            assert_eq!(ts.rows, 1);
            assert_eq!(ts.cols, idx.len());
            let mut out = Tensor::zeros(rows, ts.cols);
            for j in 0..ts.cols {
                out.data[idx[j] * ts.cols + j] = ts.data[j];
            }
            out
        };
        self.push(Op::ScatterRows(src, idx, rows), v)
    }

    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let (v, am) = {
            let ta = &self.nodes[a].value;
            let mut best = f64::NEG_INFINITY;
            let mut am = 0usize;
            for (i, x) in ta.data.iter().enumerate() {
                if *x > best {
                    best = *x;
                    am = i;
                }
            }
            (Tensor::scalar(best), am)
        };
        self.push(Op::MaxAll(a, am), v)
    }

    /// Interpolate per-vertex attributes to sample points with a fixed
    /// barycentric map.
    pub fn bary_interp(&mut self, a: NodeId, map: Rc<BaryMap>) -> NodeId {
        let v = {
            let ta = &self.nodes[a].value;
            assert_eq!(ta.rows, map.source_rows);
            let mut out = Tensor::zeros(map.entries.len(), ta.cols);
            for (s, &(i0, i1, i2, w0, w1, w2)) in map.entries.iter().enumerate() {
                for j in 0..ta.cols {
                    out.data[s * ta.cols + j] =
                        w0 * ta.get(i0, j) + w1 * ta.get(i1, j) + w2 * ta.get(i2, j);
                }
            }
            out
        };
        self.push(Op::BaryInterp(a, map), v)
    }

    /// Soft point splatting: xy [M x 2] pixel coords, depth [M x 1],
    /// colors [M x 3] -> [res*res x 4] (rgb + silhouette).
    ///
    /// Per pixel: w_i = K(|p - x_i|) * exp(-(depth_i - depth_ref) / T),
    /// rgb = (sum w_i c_i + eps_bg * bg) / (sum w_i + eps_bg),
    /// sil = 1 - exp(-sum w_i).
    pub fn splat(
        &mut self,
        xy: NodeId,
        depth: NodeId,
        colors: NodeId,
        res: usize,
        kernel_sigma: f64,
        depth_temp: f64,
        depth_ref: f64,
        background: [f64; 3],
        bg_weight: f64,
    ) -> NodeId {
        let (value, ctx) = {
            let txy = &self.nodes[xy].value;
            let td = &self.nodes[depth].value;
            let tc = &self.nodes[colors].value;
            let m = txy.rows;
            assert_eq!(txy.cols, 2);
            assert_eq!(td.rows, m);
            assert_eq!(tc.rows, m);
            assert_eq!(tc.cols, 3);
            let npix = res * res;
            let mut wsum = vec![0.0f64; npix];
            let mut csum = vec![0.0f64; npix * 3];
            let radius = (5.0 * kernel_sigma).ceil() as i64;
            let inv2s2 = 1.0 / (2.0 * kernel_sigma * kernel_sigma);
            for i in 0..m {
                let x = txy.get(i, 0);
                let y = txy.get(i, 1);
                let d = td.data[i];
                if d <= 1e-6 || !x.is_finite() || !y.is_finite() {
                    continue;
                }
                let dw = (-(d - depth_ref) / depth_temp).exp();
                let px0 = ((x.floor() as i64) - radius).max(0);
                let px1 = ((x.floor() as i64) + radius + 1).min(res as i64 - 1);
                let py0 = ((y.floor() as i64) - radius).max(0);
                let py1 = ((y.floor() as i64) + radius + 1).min(res as i64 - 1);
                for py in py0..=py1 {
                    for px in px0..=px1 {
                        let dx = px as f64 + 0.5 - x;
                        let dy = py as f64 + 0.5 - y;
                        let w = (-(dx * dx + dy * dy) * inv2s2).exp() * dw;
                        let p = (py as usize) * res + px as usize;
                        wsum[p] += w;
                        csum[p * 3] += w * tc.get(i, 0);
                        csum[p * 3 + 1] += w * tc.get(i, 1);
                        csum[p * 3 + 2] += w * tc.get(i, 2);
                    }
                }
            }
            let mut out = Tensor::zeros(npix, 4);
            for p in 0..npix {
                let denom = wsum[p] + bg_weight;
                for k in 0..3 {
                    out.data[p * 4 + k] = (csum[p * 3 + k] + bg_weight * background[k]) / denom;
                }
                out.data[p * 4 + 3] = 1.0 - (-wsum[p]).exp();
            }
            let ctx = SplatCtx {
                res,
                kernel_sigma,
                depth_temp,
                depth_ref,
                background,
                bg_weight,
                weight_sum: wsum,
            };
            (out, ctx)
        };
        self.push(Op::Splat(xy, depth, colors, Rc::new(ctx)), value)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes
    /// not reached by the root get zero gradient.
    pub fn backward(&self, root: NodeId) -> Vec<Tensor> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Reverse pass with an externally supplied seed gradient for `root`.
    pub fn backward_seeded(&self, root: NodeId, seed: Tensor) -> Vec<Tensor> {
        let n = self.nodes.len();
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|nd| Tensor::zeros(nd.value.rows, nd.value.cols))
            .collect();
        assert_eq!(
            (seed.rows, seed.cols),
            (self.nodes[root].value.rows, self.nodes[root].value.cols)
        );
        grads[root] = seed;
        for id in (0..n).rev() {
            if grads[id].data.iter().all(|g| *g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut grads[*a], &g.data);
                    accum(&mut grads[*b], &g.data);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads[*a], &g.data);
                    accum_neg(&mut grads[*b], &g.data);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data.clone(), self.nodes[*b].value.data.clone());
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * vb[i];
                        grads[*b].data[i] += gi * va[i];
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data.clone(), self.nodes[*b].value.data.clone());
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi / vb[i];
                        grads[*b].data[i] -= gi * va[i] / (vb[i] * vb[i]);
                    }
                }
                Op::Neg(a) => accum_neg(&mut grads[*a], &g.data),
                Op::Scale(a, c) => {
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * c;
                    }
                }
                Op::AddScalarC(a, _) => accum(&mut grads[*a], &g.data),
                Op::MatMul(a, b) => {
                    let va = self.nodes[*a].value.clone();
                    let vb = self.nodes[*b].value.clone();
                    // ga = g * b^T
                    for i in 0..va.rows {
                        for k in 0..va.cols {
                            let mut s = 0.0;
                            for j in 0..vb.cols {
                                s += g.get(i, j) * vb.get(k, j);
                            }
                            grads[*a].data[i * va.cols + k] += s;
                        }
                    }
                    // gb = a^T * g
                    for k in 0..vb.rows {
                        for j in 0..vb.cols {
                            let mut s = 0.0;
                            for i in 0..va.rows {
                                s += va.get(i, k) * g.get(i, j);
                            }
                            grads[*b].data[k * vb.cols + j] += s;
                        }
                    }
                }
                Op::MatMulNT(a, b) => {
                    // y = a b^T; ga = g * b, gb = g^T * a
                    let va = self.nodes[*a].value.clone();
                    let vb = self.nodes[*b].value.clone();
                    for i in 0..va.rows {
                        for k in 0..va.cols {
                            let mut s = 0.0;
                            for j in 0..vb.rows {
                                s += g.get(i, j) * vb.get(j, k);
                            }
                            grads[*a].data[i * va.cols + k] += s;
                        }
                    }
                    for j in 0..vb.rows {
                        for k in 0..vb.cols {
                            let mut s = 0.0;
                            for i in 0..va.rows {
                                s += g.get(i, j) * va.get(i, k);
                            }
                            grads[*b].data[j * vb.cols + k] += s;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads[*a], &g.data);
                    let cols = g.cols;
                    for i in 0..g.rows {
                        for j in 0..cols {
                            grads[*row].data[j] += g.get(i, j);
                        }
                    }
                }
                Op::RepeatRow(row, n) => {
                    let cols = g.cols;
                    for i in 0..*n {
                        for j in 0..cols {
                            grads[*row].data[j] += g.get(i, j);
                        }
                    }
                }
                Op::MulColBroadcast(a, col) => {
                    let va = self.nodes[*a].value.clone();
                    let vc = self.nodes[*col].value.clone();
                    for i in 0..va.rows {
                        let mut s = 0.0;
                        for j in 0..va.cols {
                            let gi = g.get(i, j);
                            grads[*a].data[i * va.cols + j] += gi * vc.data[i];
                            s += gi * va.get(i, j);
                        }
                        grads[*col].data[i] += s;
                    }
                }
                Op::MulScalarNode(a, s) => {
                    let va = self.nodes[*a].value.clone();
                    let sv = self.nodes[*s].value.data[0];
                    let mut gs = 0.0;
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * sv;
                        gs += gi * va.data[i];
                    }
                    grads[*s].data[0] += gs;
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Softplus(a) => {
                    let x = self.nodes[*a].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * sigmoid_stable(x[i]);
                    }
                }
                Op::Exp(a) => {
                    let y = self.nodes[id].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * y[i];
                    }
                }
                Op::Ln(a) => {
                    let x = self.nodes[*a].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi / x[i];
                    }
                }
                Op::Sqrt(a) => {
                    let y = self.nodes[id].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] += gi * 0.5 / y[i].max(1e-300);
                    }
                }
                Op::Recip(a) => {
                    let y = self.nodes[id].value.data.clone();
                    for (i, gi) in g.data.iter().enumerate() {
                        grads[*a].data[i] -= gi * y[i] * y[i];
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.data[0];
                    for x in grads[*a].data.iter_mut() {
                        *x += gv;
                    }
                }
                Op::MeanAll(a) => {
                    let n = grads[*a].data.len() as f64;
                    let gv = g.data[0] / n;
                    for x in grads[*a].data.iter_mut() {
                        *x += gv;
                    }
                }
                Op::RowDot(a, b) => {
                    let va = self.nodes[*a].value.clone();
                    let vb = self.nodes[*b].value.clone();
                    for i in 0..va.rows {
                        let gi = g.data[i];
                        for j in 0..va.cols {
                            grads[*a].data[i * va.cols + j] += gi * vb.get(i, j);
                            grads[*b].data[i * va.cols + j] += gi * va.get(i, j);
                        }
                    }
                }
                Op::L2NormRows(a) => {
                    let x = self.nodes[*a].value.clone();
                    let y = self.nodes[id].value.clone();
                    for i in 0..x.rows {
                        let row = &x.data[i * x.cols..(i + 1) * x.cols];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                        let gy: f64 = (0..x.cols).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..x.cols {
                            grads[*a].data[i * x.cols + j] +=
                                (g.get(i, j) - y.get(i, j) * gy) / norm;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols;
                    let cb = self.nodes[*b].value.cols;
                    for i in 0..g.rows {
                        for j in 0..ca {
                            grads[*a].data[i * ca + j] += g.get(i, j);
                        }
                        for j in 0..cb {
                            grads[*b].data[i * cb + j] += g.get(i, ca + j);
                        }
                    }
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..g.cols {
                            grads[r].data[j] += g.get(i, j);
                        }
                    }
                }
                Op::Reshape(a) => accum(&mut grads[*a], &g.data),
                Op::SliceCols(a, start, len) => {
                    let ca = self.nodes[*a].value.cols;
                    for i in 0..g.rows {
                        for j in 0..*len {
                            grads[*a].data[i * ca + start + j] += g.get(i, j);
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let x = self.nodes[*a].value.clone();
                    let y = self.nodes[id].value.clone();
                    for i in 0..x.rows {
                        let gi = g.data[i];
                        for j in 0..x.cols {
                            grads[*a].data[i * x.cols + j] += gi * (x.get(i, j) - y.data[i]).exp();
                        }
                    }
                }
                Op::DiagCol(a) => {
                    let n = self.nodes[*a].value.rows;
                    for i in 0..n {
                        grads[*a].data[i * n + i] += g.data[i];
                    }
                }
                Op::MaxRows(a, argmax) => {
                    let cols = g.cols;
                    for j in 0..cols {
                        grads[*a].data[argmax[j] * cols + j] += g.data[j];
                    }
                }
                Op::ScatterRows(src, idx, _) => {
                    let cols = g.cols;
                    for j in 0..cols {
                        grads[*src].data[j] += g.get(idx[j], j);
                    }
                }
                Op::MaxAll(a, am) => {
                    grads[*a].data[*am] += g.data[0];
                }
                Op::BaryInterp(a, map) => {
                    let cols = g.cols;
                    for (s, &(i0, i1, i2, w0, w1, w2)) in map.entries.iter().enumerate() {
                        for j in 0..cols {
                            let gv = g.get(s, j);
                            grads[*a].data[i0 * cols + j] += w0 * gv;
                            grads[*a].data[i1 * cols + j] += w1 * gv;
                            grads[*a].data[i2 * cols + j] += w2 * gv;
                        }
                    }
                }
                Op::Splat(xy, depth, colors, ctx) => {
                    self.splat_backward(id, *xy, *depth, *colors, ctx, &g, &mut grads);
                }
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn splat_backward(
        &self,
        out_id: NodeId,
        xy: NodeId,
        depth: NodeId,
        colors: NodeId,
        ctx: &SplatCtx,
        g: &Tensor,
        grads: &mut [Tensor],
    ) {
        let txy = &self.nodes[xy].value;
        let td = &self.nodes[depth].value;
        let tc = &self.nodes[colors].value;
        let out = &self.nodes[out_id].value;
        let res = ctx.res;
        let radius = (5.0 * ctx.kernel_sigma).ceil() as i64;
        let inv2s2 = 1.0 / (2.0 * ctx.kernel_sigma * ctx.kernel_sigma);
        let s2 = ctx.kernel_sigma * ctx.kernel_sigma;
        let m = txy.rows;
        let mut gxy = vec![0.0f64; m * 2];
        let mut gd = vec![0.0f64; m];
        let mut gc = vec![0.0f64; m * 3];
        for i in 0..m {
            let x = txy.get(i, 0);
            let y = txy.get(i, 1);
            let d = td.data[i];
            if d <= 1e-6 || !x.is_finite() || !y.is_finite() {
                continue;
            }
            let dw = (-(d - ctx.depth_ref) / ctx.depth_temp).exp();
            let px0 = ((x.floor() as i64) - radius).max(0);
            let px1 = ((x.floor() as i64) + radius + 1).min(res as i64 - 1);
            let py0 = ((y.floor() as i64) - radius).max(0);
            let py1 = ((y.floor() as i64) + radius + 1).min(res as i64 - 1);
            for py in py0..=py1 {
                for px in px0..=px1 {
                    let dx = px as f64 + 0.5 - x;
                    let dy = py as f64 + 0.5 - y;
                    let w = (-(dx * dx + dy * dy) * inv2s2).exp() * dw;
                    let p = (py as usize) * res + px as usize;
                    let denom = ctx.weight_sum[p] + ctx.bg_weight;
                    // d out / d w_i and d out / d c_i
                    let mut dldw = 0.0;
                    for k in 0..3 {
                        let gv = g.get(p, k);
                        if gv != 0.0 {
                            dldw += gv * (tc.get(i, k) - out.get(p, k)) / denom;
                            gc[i * 3 + k] += gv * w / denom;
                        }
                    }
                    // silhouette: 1 - exp(-W)
                    let gs = g.get(p, 3);
                    if gs != 0.0 {
                        dldw += gs * (-ctx.weight_sum[p]).exp();
                    }
                    if dldw != 0.0 {
                        // w depends on x, y, depth
                        gxy[i * 2] += dldw * w * dx / s2;
                        gxy[i * 2 + 1] += dldw * w * dy / s2;
                        gd[i] -= dldw * w / ctx.depth_temp;
                    }
                }
            }
        }
        accum(&mut grads[xy], &gxy);
        accum(&mut grads[depth], &gd);
        accum(&mut grads[colors], &gc);
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accum(t: &mut Tensor, g: &[f64]) {
    for (x, gi) in t.data.iter_mut().zip(g) {
        *x += gi;
    }
}

fn accum_neg(t: &mut Tensor, g: &[f64]) {
    for (x, gi) in t.data.iter_mut().zip(g) {
        *x -= gi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_gradient;

    fn rng_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_gradients_match_fd() {
        let a0 = rng_vec(6, 1);
        let b0 = rng_vec(12, 2);
        let f = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new();
            let na = g.leaf(Tensor::from_vec(a.to_vec(), 2, 3));
            let nb = g.leaf(Tensor::from_vec(b.to_vec(), 3, 4));
            let y = g.matmul(na, nb);
            let t = g.tanh(y);
            let s = g.sum_all(t);
            (g, na, nb, s)
        };
        let (g, na, nb, s) = f(&a0, &b0);
        let grads = g.backward(s);
        let fda = fd_gradient(&a0, 1e-6, |a| {
            let (g, _, _, s) = f(a, &b0);
            g.scalar_value(s)
        });
        let fdb = fd_gradient(&b0, 1e-6, |b| {
            let (g, _, _, s) = f(&a0, b);
            g.scalar_value(s)
        });
        for (x, y) in grads[na].data.iter().zip(&fda) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        for (x, y) in grads[nb].data.iter().zip(&fdb) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn composite_ops_gradients_match_fd() {
        let x0 = rng_vec(12, 3);
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let n = g.leaf(Tensor::from_vec(x.to_vec(), 3, 4));
            let nn = g.l2_normalize_rows(n);
            let lse = g.logsumexp_rows(nn);
            let sp = g.softplus(lse);
            let sg = g.sigmoid(n);
            let rd = g.row_dot(nn, sg);
            let a = g.sum_all(sp);
            let b = g.sum_all(rd);
            let t = g.add(a, b);
            (g, n, t)
        };
        let (g, n, t) = eval(&x0);
        let grads = g.backward(t);
        let fd = fd_gradient(&x0, 1e-6, |x| {
            let (g, _, t) = eval(x);
            g.scalar_value(t)
        });
        for (x, y) in grads[n].data.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn broadcast_and_slice_gradients_match_fd() {
        let x0 = rng_vec(4, 4);
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let n = g.leaf(Tensor::from_vec(x.to_vec(), 1, 4));
            let row1 = g.slice_cols(n, 1, 2);
            let rep = g.repeat_row(row1, 3);
            let col = g.leaf(Tensor::col(vec![0.5, -1.0, 2.0]));
            let mc = g.mul_col_broadcast(rep, col);
            let e = g.exp(mc);
            let s = g.mean_all(e);
            let ident = g_identity(&mut g);
            let d = g.diag_col(ident);
            let sd = g.sum_all(d);
            let total = g.mul(s, sd);
            (g, n, total)
        };
        fn g_identity(g: &mut Graph) -> NodeId {
            g.leaf(Tensor::from_vec(vec![1.0, 0.0, 0.0, 2.0], 2, 2))
        }
        let (g, n, t) = eval(&x0);
        let grads = g.backward(t);
        let fd = fd_gradient(&x0, 1e-6, |x| {
            let (g, _, t) = eval(x);
            g.scalar_value(t)
        });
        for (x, y) in grads[n].data.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn max_and_scatter_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 5.0, 3.0, 2.0, 0.0, 4.0], 2, 3));
        let (m, am) = g.max_rows_with_argmax(a);
        assert_eq!(g.value(m).data, vec![2.0, 5.0, 4.0]);
        assert_eq!(*am, vec![1, 0, 1]);
        let sc = g.scatter_rows(m, am, 2);
        assert_eq!(g.value(sc).get(1, 0), 2.0);
        assert_eq!(g.value(sc).get(0, 1), 5.0);
        let s = g.sum_all(sc);
        let grads = g.backward(s);
        assert_eq!(grads[a].data, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn splat_gradients_match_fd() {
        let xy0 = vec![7.2, 8.1, 9.6, 6.3];
        let d0 = vec![1.1, 1.4];
        let c0 = vec![0.9, 0.2, 0.1, 0.3, 0.8, 0.5];
        let eval = |xy: &[f64], d: &[f64], c: &[f64]| {
            let mut g = Graph::new();
            let nxy = g.leaf(Tensor::from_vec(xy.to_vec(), 2, 2));
            let nd = g.leaf(Tensor::from_vec(d.to_vec(), 2, 1));
            let nc = g.leaf(Tensor::from_vec(c.to_vec(), 2, 3));
            let out = g.splat(nxy, nd, nc, 16, 1.2, 4.0, 1.2, [1.0, 1.0, 1.0], 1e-3);
            let t = g.tanh(out);
            let s = g.sum_all(t);
            (g, nxy, nd, nc, s)
        };
        let (g, nxy, nd, nc, s) = eval(&xy0, &d0, &c0);
        let grads = g.backward(s);
        let check = |analytic: &[f64], fd: &[f64]| {
            for (x, y) in analytic.iter().zip(fd) {
                let denom = x.abs().max(y.abs()).max(1e-4);
                assert!((x - y).abs() / denom < 1e-3, "{x} vs {y}");
            }
        };
        check(
            &grads[nxy].data,
            &fd_gradient(&xy0, 1e-5, |v| eval(v, &d0, &c0).0.scalar_value(s)),
        );
        check(
            &grads[nd].data,
            &fd_gradient(&d0, 1e-5, |v| eval(&xy0, v, &c0).0.scalar_value(s)),
        );
        check(
            &grads[nc].data,
            &fd_gradient(&c0, 1e-5, |v| eval(&xy0, &d0, v).0.scalar_value(s)),
        );
    }
}
