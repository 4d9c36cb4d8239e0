//! Tape-based reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a leaf created with
//! `requires_grad = true`. Constants never receive gradients, and
//! [`Graph::detach`] cuts the tape explicitly.
//!
//! The op set is deliberately small: what the interaction embedding, the
//! recurrent generator and the transformer discriminator need, plus two fused
//! kernels ([`Graph::grid_project`] and [`Graph::block_attention`]) that would
//! otherwise dominate the node count.

use std::fmt;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar: {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with optional transposes, via
/// `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &Mat,
    ta: bool,
    b: &Mat,
    tb: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) -> (usize, usize) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return (m, n);
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return (m, n);
    }
    // SAFETY: the strides above describe exactly the buffers of `a`, `b`
    // (checked by the shape asserts) and `c` has m * n elements, row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![0.0; a.rows * b.cols];
    gemm(a, false, b, false, &mut out, 1.0, 0.0);
    Mat::from_vec(a.rows, b.cols, out)
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One neighbour contribution to a directional grid: the grid cell it falls
/// in (frozen) and the row of the neighbour-velocity matrix it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridEntry {
    pub cell: usize,
    pub neighbor_row: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SumAll(Var),
    SumCols(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        weights: Vec<f64>,
    },
    GridProject {
        vel: Var,
        nb_vel: Var,
        weight: Var,
        entries: Vec<Vec<GridEntry>>,
    },
    GoalDirection {
        pos: Var,
        goals: Vec<Option<[f64; 2]>>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are append-only; a `Var` is only meaningful
/// for the graph that produced it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
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

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that is cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a (r x c) * row (1 x c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols, "mul_row width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| f(*x)).collect());
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols);
        let mut out = Mat::zeros(va.rows, len);
        for r in 0..va.rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows);
        let out = Mat::from_vec(len, va.cols, va.data[start * va.cols..(start + len) * va.cols].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    /// Sum of all entries, as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows).map(|r| va.row(r).iter().sum()).collect();
        let out = Mat::from_vec(va.rows, 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows);
        let n = vx.cols as f64;
        for r in 0..vx.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`, computed
    /// independently for each of `batch` sequences of length `seq`.
    ///
    /// Rows are laid out time-major: row `t * batch + b` is step `t` of
    /// sequence `b`.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.rows, batch * seq);
        assert_eq!(vk.shape(), vq.shape());
        assert_eq!(vv.rows, vq.rows);
        let d = vq.cols;
        let dv = vv.cols;
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = vec![0.0; batch * seq * seq];
        let mut out = Mat::zeros(vq.rows, dv);
        for b in 0..batch {
            for i in 0..seq {
                let qi = vq.row(i * batch + b);
                let w = &mut weights[(b * seq + i) * seq..(b * seq + i + 1) * seq];
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq {
                    let kj = vk.row(j * batch + b);
                    let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    w[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for x in w.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in w.iter_mut() {
                    *x /= z;
                }
                let o = out.row_mut(i * batch + b);
                for j in 0..seq {
                    let vj = vv.row(j * batch + b);
                    for (oo, vvj) in o.iter_mut().zip(vj) {
                        *oo += w[j] * vvj;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                weights,
            },
            rg,
        )
    }

    /// Attention weights recorded by a [`Graph::block_attention`] node, as
    /// `batch * seq` rows of length `seq`.
    pub fn attention_weights(&self, v: Var) -> Option<Mat> {
        match &self.nodes[v.0].op {
            Op::Attention {
                weights, batch, seq, ..
            } => Some(Mat::from_vec(batch * seq, *seq, weights.clone())),
            _ => None,
        }
    }

    /// Directional-grid projection. For each row `b`:
    /// `out[b] = sum_e (nb_vel[e.neighbor_row] - vel[b]) . W[2 e.cell .. 2 e.cell + 2]`
    /// where `W` is `(2 * cells) x p`. Cell assignment is fixed by the caller
    /// and carries no gradient.
    pub fn grid_project(&mut self, vel: Var, nb_vel: Var, weight: Var, entries: Vec<Vec<GridEntry>>) -> Var {
        let (vv, vn, vw) = (self.value(vel), self.value(nb_vel), self.value(weight));
        assert_eq!(vv.cols, 2);
        assert_eq!(vn.cols, 2);
        assert_eq!(entries.len(), vv.rows);
        let p = vw.cols;
        let mut out = Mat::zeros(vv.rows, p);
        for (b, row_entries) in entries.iter().enumerate() {
            let o = &mut out.data[b * p..(b + 1) * p];
            for e in row_entries {
                assert!(2 * e.cell + 1 < vw.rows, "grid cell out of range");
                let rx = vn.get(e.neighbor_row, 0) - vv.get(b, 0);
                let ry = vn.get(e.neighbor_row, 1) - vv.get(b, 1);
                let wx = vw.row(2 * e.cell);
                let wy = vw.row(2 * e.cell + 1);
                for i in 0..p {
                    o[i] += rx * wx[i] + ry * wy[i];
                }
            }
        }
        let rg = self.rg(vel) || self.rg(nb_vel) || self.rg(weight);
        self.push(
            out,
            Op::GridProject {
                vel,
                nb_vel,
                weight,
                entries,
            },
            rg,
        )
    }

    /// Unit vector from each row of `pos` towards its goal; zero where the
    /// goal is missing or coincides with the position.
    pub fn goal_direction(&mut self, pos: Var, goals: Vec<Option<[f64; 2]>>) -> Var {
        let vp = self.value(pos);
        assert_eq!(vp.cols, 2);
        assert_eq!(goals.len(), vp.rows);
        let mut out = Mat::zeros(vp.rows, 2);
        for (b, goal) in goals.iter().enumerate() {
            if let Some(g) = goal {
                let dx = g[0] - vp.get(b, 0);
                let dy = g[1] - vp.get(b, 1);
                let n = (dx * dx + dy * dy).sqrt();
                if n > GOAL_EPS {
                    out.data[2 * b] = dx / n;
                    out.data[2 * b + 1] = dy / n;
                }
            }
        }
        let rg = self.rg(pos);
        self.push(out, Op::GoalDirection { pos, goals }, rg)
    }

    /// Gradient of `v` after [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Mat {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }

    /// Reverse sweep from a scalar root (seeded with 1).
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).data.len(), 1, "backward root must be scalar");
        let seed = Mat::from_vec(1, 1, vec![1.0]);
        self.backward_with(root, seed);
    }

    /// Reverse sweep from `root` seeded with an arbitrary cotangent.
    pub fn backward_with(&mut self, root: Var, seed: Mat) {
        assert_eq!(self.value(root).shape(), seed.shape());
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let (r, c) = self.nodes[v.0].value.shape();
                grads[v.0].get_or_insert_with(|| Mat::zeros(r, c))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = &self.nodes[b.0].value;
                    let ga = buf!(a);
                    gemm(g, false, vb, true, &mut ga.data, 1.0, 1.0);
                }
                if self.rg(b) {
                    let va = &self.nodes[a.0].value;
                    let gb = buf!(b);
                    gemm(va, true, g, false, &mut gb.data, 1.0, 1.0);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    buf!(*a).add_assign(g);
                }
                if self.rg(*b) {
                    buf!(*b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    buf!(*a).add_assign(g);
                }
                if self.rg(*b) {
                    for (x, y) in buf!(*b).data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = self.nodes[b.0].value.data.clone();
                    for ((x, y), z) in buf!(a).data.iter_mut().zip(&g.data).zip(&vb) {
                        *x += y * z;
                    }
                }
                if self.rg(b) {
                    let va = self.nodes[a.0].value.data.clone();
                    for ((x, y), z) in buf!(b).data.iter_mut().zip(&g.data).zip(&va) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    buf!(*a).add_assign(g);
                }
                if self.rg(*row) {
                    let gr = buf!(*row);
                    for r in 0..g.rows {
                        for (x, y) in gr.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                if self.rg(a) {
                    let vr = self.nodes[row.0].value.data.clone();
                    let ga = buf!(a);
                    for r in 0..g.rows {
                        for ((x, y), z) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(&vr) {
                            *x += y * z;
                        }
                    }
                }
                if self.rg(row) {
                    let va = &self.nodes[a.0].value;
                    let mut acc = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for ((x, y), z) in acc.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *x += y * z;
                        }
                    }
                    for (x, y) in buf!(row).data.iter_mut().zip(&acc) {
                        *x += y;
                    }
                }
            }
            Op::Scale(a, s) => {
                for (x, y) in buf!(*a).data.iter_mut().zip(&g.data) {
                    *x += y * s;
                }
            }
            Op::AddScalar(a) => buf!(*a).add_assign(g),
            Op::Relu(a) => {
                for ((x, y), o) in buf!(*a).data.iter_mut().zip(&g.data).zip(&out.data) {
                    if *o > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Tanh(a) => {
                for ((x, y), o) in buf!(*a).data.iter_mut().zip(&g.data).zip(&out.data) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Sigmoid(a) => {
                for ((x, y), o) in buf!(*a).data.iter_mut().zip(&g.data).zip(&out.data) {
                    *x += y * o * (1.0 - o);
                }
            }
            Op::Exp(a) => {
                for ((x, y), o) in buf!(*a).data.iter_mut().zip(&g.data).zip(&out.data) {
                    *x += y * o;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols;
                    if self.rg(*p) {
                        let gp = buf!(*p);
                        for r in 0..g.rows {
                            for (x, y) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += y;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let ga = buf!(*a);
                for r in 0..g.rows {
                    for (x, y) in ga.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.data.len();
                    if self.rg(*p) {
                        for (x, y) in buf!(*p).data.iter_mut().zip(&g.data[off..off + len]) {
                            *x += y;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let ga = buf!(*a);
                let off = start * ga.cols;
                for (x, y) in ga.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                    *x += y;
                }
            }
            Op::SumAll(a) => {
                let s = g.data[0];
                for x in buf!(*a).data.iter_mut() {
                    *x += s;
                }
            }
            Op::SumCols(a) => {
                let ga = buf!(*a);
                for r in 0..ga.rows {
                    let s = g.data[r];
                    for x in ga.row_mut(r) {
                        *x += s;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let gx = buf!(*x);
                let n = g.cols as f64;
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((dst, gi), yi) in gx.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *dst += inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                weights,
            } => self.attention_backward(g, *q, *k, *v, *batch, *seq, weights, grads),
            Op::GridProject {
                vel,
                nb_vel,
                weight,
                entries,
            } => {
                let (vel, nb_vel, weight) = (*vel, *nb_vel, *weight);
                let vv = &self.nodes[vel.0].value;
                let vn = &self.nodes[nb_vel.0].value;
                let vw = &self.nodes[weight.0].value;
                let p = vw.cols;
                let mut g_vel = vec![0.0; vv.data.len()];
                let mut g_nb = vec![0.0; vn.data.len()];
                let mut g_w = if self.rg(weight) {
                    Some(vec![0.0; vw.data.len()])
                } else {
                    None
                };
                for (b, row_entries) in entries.iter().enumerate() {
                    let gr = g.row(b);
                    for e in row_entries {
                        let wx = vw.row(2 * e.cell);
                        let wy = vw.row(2 * e.cell + 1);
                        let dx: f64 = gr.iter().zip(wx).map(|(a, b)| a * b).sum();
                        let dy: f64 = gr.iter().zip(wy).map(|(a, b)| a * b).sum();
                        g_vel[2 * b] -= dx;
                        g_vel[2 * b + 1] -= dy;
                        g_nb[2 * e.neighbor_row] += dx;
                        g_nb[2 * e.neighbor_row + 1] += dy;
                        if let Some(gw) = g_w.as_mut() {
                            let rx = vn.get(e.neighbor_row, 0) - vv.get(b, 0);
                            let ry = vn.get(e.neighbor_row, 1) - vv.get(b, 1);
                            let (ox, oy) = (2 * e.cell * p, (2 * e.cell + 1) * p);
                            for i in 0..p {
                                gw[ox + i] += rx * gr[i];
                                gw[oy + i] += ry * gr[i];
                            }
                        }
                    }
                }
                if self.rg(vel) {
                    for (x, y) in buf!(vel).data.iter_mut().zip(&g_vel) {
                        *x += y;
                    }
                }
                if self.rg(nb_vel) {
                    for (x, y) in buf!(nb_vel).data.iter_mut().zip(&g_nb) {
                        *x += y;
                    }
                }
                if let Some(gw) = g_w {
                    for (x, y) in buf!(weight).data.iter_mut().zip(&gw) {
                        *x += y;
                    }
                }
            }
            Op::GoalDirection { pos, goals } => {
                let vp = &self.nodes[pos.0].value;
                let mut gp = vec![0.0; vp.data.len()];
                for (b, goal) in goals.iter().enumerate() {
                    let Some(goal) = goal else { continue };
                    let dx = goal[0] - vp.get(b, 0);
                    let dy = goal[1] - vp.get(b, 1);
                    let n = (dx * dx + dy * dy).sqrt();
                    if n <= GOAL_EPS {
                        continue;
                    }
                    let (ux, uy) = (dx / n, dy / n);
                    let (gx, gy) = (g.get(b, 0), g.get(b, 1));
                    let dot = gx * ux + gy * uy;
                    // d u / d pos = -(I - u u^T) / n
                    gp[2 * b] -= (gx - dot * ux) / n;
                    gp[2 * b + 1] -= (gy - dot * uy) / n;
                }
                for (x, y) in buf!(*pos).data.iter_mut().zip(&gp) {
                    *x += y;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        weights: &[f64],
        grads: &mut [Option<Mat>],
    ) {
        let vq = &self.nodes[q.0].value;
        let vk = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let d = vq.cols;
        let scale = 1.0 / (d as f64).sqrt();
        let mut gq = Mat::zeros(vq.rows, d);
        let mut gk = Mat::zeros(vk.rows, d);
        let mut gv = Mat::zeros(vv.rows, vv.cols);
        let mut gs = vec![0.0; seq];
        for b in 0..batch {
            for i in 0..seq {
                let w = &weights[(b * seq + i) * seq..(b * seq + i + 1) * seq];
                let go = g.row(i * batch + b);
                // dV_j += w_ij * dO_i ; dP_ij = dO_i . V_j
                for j in 0..seq {
                    let vr = vv.row(j * batch + b);
                    let dp: f64 = go.iter().zip(vr).map(|(x, y)| x * y).sum();
                    gs[j] = dp;
                    for (x, y) in gv.row_mut(j * batch + b).iter_mut().zip(go) {
                        *x += w[j] * y;
                    }
                }
                let dot: f64 = gs.iter().zip(w).map(|(x, y)| x * y).sum();
                for j in 0..seq {
                    gs[j] = w[j] * (gs[j] - dot) * scale;
                }
                let qi = vq.row(i * batch + b).to_vec();
                for j in 0..seq {
                    let s = gs[j];
                    if s == 0.0 {
                        continue;
                    }
                    let kj = vk.row(j * batch + b);
                    for (x, y) in gq.row_mut(i * batch + b).iter_mut().zip(kj) {
                        *x += s * y;
                    }
                    for (x, y) in gk.row_mut(j * batch + b).iter_mut().zip(&qi) {
                        *x += s * y;
                    }
                }
            }
        }
        for (var, gm) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                let (r, c) = self.nodes[var.0].value.shape();
                grads[var.0].get_or_insert_with(|| Mat::zeros(r, c)).add_assign(&gm);
            }
        }
    }
}

const GOAL_EPS: f64 = 1e-9;

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(w * f(x)))/dx for a random weighting.
    fn check_grad(x0: Mat, f: impl Fn(&mut Graph, Var) -> Var) {
        let weights: Vec<f64> = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = f(&mut g, x);
            (0..g.value(y).data.len()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect()
        };
        let eval = |x: Mat| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = f(&mut g, xv);
            g.value(y).data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let xv = g.variable(x0.clone());
        let y = f(&mut g, xv);
        let (r, c) = g.value(y).shape();
        g.backward_with(y, Mat::from_vec(r, c, weights.clone()));
        let analytic = g.grad_or_zeros(xv);
        let h = 1e-6;
        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = analytic.data[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} analytic {an}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_matches_naive() {
        let a = sample(3, 4, 1);
        let b = sample(4, 5, 2);
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let w = sample(4, 3, 9);
        check_grad(sample(2, 4, 3), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let t = g.tanh(y);
            let s = g.sigmoid(t);
            let e = g.exp(s);
            let m = g.mul(e, t);
            g.relu(m)
        });
    }

    #[test]
    fn row_broadcast_grads() {
        let r = sample(1, 3, 5);
        check_grad(sample(4, 3, 4), move |g, x| {
            let rv = g.constant(r.clone());
            let a = g.add_row(x, rv);
            let m = g.mul_row(a, rv);
            let row = g.slice_rows(x, 1, 1);
            g.mul_row(m, row)
        });
    }

    #[test]
    fn concat_slice_sum_grads() {
        check_grad(sample(3, 4, 6), |g, x| {
            let a = g.slice_cols(x, 1, 2);
            let b = g.slice_rows(x, 0, 2);
            let c = g.concat_cols(&[x, a]);
            let sq = g.square(c);
            let s = g.sum_cols(sq);
            let bb = g.sum_cols(b);
            let both = g.concat_rows(&[s, bb]);
            let t = g.sum(both);
            let u = g.add_scalar(t, -1.0);
            g.scale(u, 0.5)
        });
    }

    #[test]
    fn layer_norm_rows_are_standardized_and_grad_checks() {
        let mut g = Graph::new();
        let x = g.constant(sample(3, 6, 8));
        let y = g.layer_norm(x, 1e-5);
        for r in 0..3 {
            let row = g.value(y).row(r);
            let m: f64 = row.iter().sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
        }
        check_grad(sample(3, 6, 8), |g, x| g.layer_norm(x, 1e-5));
    }

    #[test]
    fn attention_grads() {
        let (batch, seq, d) = (2, 3, 4);
        let kx = sample(batch * seq, d, 12);
        let vx = sample(batch * seq, 5, 13);
        check_grad(sample(batch * seq, d, 11), move |g, q| {
            let k = g.constant(kx.clone());
            let v = g.constant(vx.clone());
            g.block_attention(q, k, v, batch, seq)
        });
        let qx = sample(batch * seq, d, 11);
        let vx2 = sample(batch * seq, 5, 13);
        check_grad(sample(batch * seq, d, 14), move |g, k| {
            let q = g.constant(qx.clone());
            let v = g.constant(vx2.clone());
            g.block_attention(q, k, v, batch, seq)
        });
        let qx = sample(batch * seq, d, 11);
        let kx = sample(batch * seq, d, 12);
        check_grad(sample(batch * seq, 5, 15), move |g, v| {
            let q = g.constant(qx.clone());
            let k = g.constant(kx.clone());
            g.block_attention(q, k, v, batch, seq)
        });
    }

    #[test]
    fn grid_project_grads() {
        let w = sample(8, 3, 21);
        let nb = sample(3, 2, 22);
        let entries = vec![
            vec![GridEntry { cell: 1, neighbor_row: 0 }, GridEntry { cell: 3, neighbor_row: 2 }],
            vec![],
            vec![GridEntry { cell: 1, neighbor_row: 1 }],
        ];
        let e2 = entries.clone();
        check_grad(sample(3, 2, 20), move |g, v| {
            let wv = g.constant(w.clone());
            let n = g.constant(nb.clone());
            g.grid_project(v, n, wv, e2.clone())
        });
        let vel = sample(3, 2, 20);
        let nb = sample(3, 2, 22);
        let e3 = entries.clone();
        check_grad(sample(8, 3, 21), move |g, w| {
            let v = g.constant(vel.clone());
            let n = g.constant(nb.clone());
            g.grid_project(v, n, w, e3.clone())
        });
        let vel = sample(3, 2, 20);
        let w = sample(8, 3, 21);
        check_grad(sample(3, 2, 22), move |g, n| {
            let v = g.constant(vel.clone());
            let wv = g.constant(w.clone());
            g.grid_project(v, n, wv, entries.clone())
        });
    }

    #[test]
    fn goal_direction_grads() {
        let goals = vec![Some([3.0, -1.0]), None, Some([-2.0, 4.0])];
        check_grad(sample(3, 2, 31), move |g, p| g.goal_direction(p, goals.clone()));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Mat::from_vec(1, 1, vec![2.0]));
        let y = g.square(x);
        let yd = g.detach(y);
        let z = g.mul(yd, x);
        g.backward(z);
        // d/dx (stop(x^2) * x) = x^2
        assert_eq!(g.grad(x).unwrap().data[0], 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let x = g.variable(Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let y = g.mul(c, x);
        let s = g.sum(y);
        g.backward(s);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data, vec![1.0, 2.0]);
    }
}
