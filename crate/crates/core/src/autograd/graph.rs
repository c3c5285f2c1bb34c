//! Define-by-run tape. Every op appends a node, so node ids are already in
//! topological order and the backward sweep is a reverse scan.

use super::kernels::{gemm, mean_var, softmax_in_place, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    DivCol(Var, Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Recip(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Reshape(Var),
    RowSum(Var),
    RowMean(Var),
    RowStd { x: Var, floored: Vec<bool> },
    RowSoftmax(Var),
    PairwiseDist(Var, Var),
    PairwiseSqDist(Var, Var),
    GroupMax { x: Var, argmax: Vec<usize> },
    RowMin { x: Var, argmin: Vec<usize> },
    MeanRows(Var),
    FrobeniusSq(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A graph is single-threaded; build a fresh one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Inserts a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), false, Op::Leaf)
    }

    /// Inserts a differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let t = if t.is_differentiable() {
            t
        } else {
            t.requires_grad()
        };
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Intermediate nodes get their gradient buffer during backward; only
    /// leaves carry one from the start.
    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Var {
        if requires_grad && matches!(op, Op::Leaf) && !value.is_differentiable() {
            value = value.requires_grad();
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    /// Back-propagates from a scalar `loss`, adding into every differentiable
    /// node's gradient buffer. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            self.nodes[id].value.absorb_grad(g);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let p = val(*b).cols();
                if let Some(da) = self.slot(adj, *a) {
                    gemm(m, p, k, 1.0, g, Layout::Normal, val(*b).data(), Layout::Transposed, 1.0, da);
                }
                if let Some(db) = self.slot(adj, *b) {
                    gemm(k, m, p, 1.0, val(*a).data(), Layout::Transposed, g, Layout::Normal, 1.0, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2();
                if let Some(dx) = self.slot(adj, *x) {
                    // out is c x r
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(adj, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, g);
                }
            }
            Op::AddRow(x, b) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::SubCol(x, col) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, g);
                }
                if let Some(dc) = self.slot(adj, *col) {
                    for (d, row) in dc.iter_mut().zip(g.chunks_exact(c)) {
                        *d -= row.iter().sum::<f64>();
                    }
                }
            }
            Op::DivCol(x, col) => {
                let c = out.cols();
                let den = val(*col).data();
                if let Some(dx) = self.slot(adj, *x) {
                    for (i, (drow, grow)) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += g / den[i];
                        }
                    }
                }
                if let Some(dc) = self.slot(adj, *col) {
                    let xs = val(*x).data();
                    for i in 0..dc.len() {
                        let s: f64 = (0..c).map(|j| g[i * c + j] * xs[i * c + j]).sum();
                        dc[i] -= s / (den[i] * den[i]);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, g), x) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += if *x > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y;
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d -= g * y * y;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(*a).dims2();
                let cb = val(*b).cols();
                let c = ca + cb;
                if let Some(da) = self.slot(adj, *a) {
                    for i in 0..r {
                        add_into(&mut da[i * ca..(i + 1) * ca], &g[i * c..i * c + ca]);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for i in 0..r {
                        add_into(&mut db[i * cb..(i + 1) * cb], &g[i * c + ca..(i + 1) * c]);
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(&mut dx[start * c..start * c + g.len()], g);
                }
            }
            Op::GatherRows(x, idx) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::RepeatRows(x) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    for row in g.chunks_exact(c) {
                        add_into(dx, row);
                    }
                }
            }
            Op::RowSum(x) | Op::RowMean(x) => {
                let c = val(*x).cols();
                let scale = if matches!(node.op, Op::RowMean(_)) {
                    1.0 / c as f64
                } else {
                    1.0
                };
                if let Some(dx) = self.slot(adj, *x) {
                    for (drow, gi) in dx.chunks_exact_mut(c).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gi * scale);
                    }
                }
            }
            Op::RowStd { x, floored } => {
                let c = val(*x).cols();
                if let Some(dx) = self.slot(adj, *x) {
                    let xs = val(*x).data();
                    for i in 0..floored.len() {
                        if floored[i] {
                            continue;
                        }
                        let row = &xs[i * c..(i + 1) * c];
                        let (mean, _) = mean_var(row);
                        let sigma = out.data()[i];
                        let k = g[i] / (c as f64 * sigma);
                        for (d, x) in dx[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *d += k * (x - mean);
                        }
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let c = out.cols();
                if let Some(dx) = self.slot(adj, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::PairwiseDist(a, b) | Op::PairwiseSqDist(a, b) => {
                let squared = matches!(node.op, Op::PairwiseSqDist(..));
                let (n, d) = val(*a).dims2();
                let m = val(*b).rows();
                // w_ij = dL/dD_ij * dD_ij/d(a_i - b_j) scale
                let w: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, dist)| {
                        if squared {
                            2.0 * g
                        } else if *dist > 0.0 {
                            g / dist
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(da) = self.slot(adj, *a) {
                    let av = val(*a).data();
                    for i in 0..n {
                        let s: f64 = w[i * m..(i + 1) * m].iter().sum();
                        for k in 0..d {
                            da[i * d + k] += s * av[i * d + k];
                        }
                    }
                    gemm(n, m, d, -1.0, &w, Layout::Normal, val(*b).data(), Layout::Normal, 1.0, da);
                }
                if let Some(db) = self.slot(adj, *b) {
                    let bv = val(*b).data();
                    for j in 0..m {
                        let s: f64 = (0..n).map(|i| w[i * m + j]).sum();
                        for k in 0..d {
                            db[j * d + k] += s * bv[j * d + k];
                        }
                    }
                    gemm(m, n, d, -1.0, &w, Layout::Transposed, val(*a).data(), Layout::Normal, 1.0, db);
                }
            }
            Op::GroupMax { x, argmax } | Op::RowMin { x, argmin: argmax } => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (g, &src) in g.iter().zip(argmax) {
                        dx[src] += g;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).dims2();
                if let Some(dx) = self.slot(adj, *x) {
                    for row in dx.chunks_exact_mut(c) {
                        for (d, g) in row.iter_mut().zip(g) {
                            *d += g / r as f64;
                        }
                    }
                }
            }
            Op::FrobeniusSq(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (d, x) in dx.iter_mut().zip(val(*x).data()) {
                        *d += 2.0 * g[0] * x;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// Forward constructors.
impl Graph {
    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let vx = self.value(x);
        let data = vx.data().iter().map(|x| f(*x)).collect();
        Tensor::new(vx.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, p) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * p];
        gemm(m, k, p, 1.0, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, 0.0, &mut out);
        Ok(self.record(Tensor::matrix(m, p, out), &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transposed();
        self.record(t, &[x], Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(t, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        self.record(t, &[x], Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v + s);
        self.record(t, &[x], Op::AddScalar(x))
    }

    /// `x[m x n] + b` with `b` holding `n` values broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            add_into(row, &bv);
        }
        Ok(self.record(Tensor::matrix(m, n, data), &[x, b], Op::AddRow(x, b)))
    }

    fn col_broadcast(&self, op: &'static str, x: Var, col: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(x);
        if self.value(col).numel() != m {
            return Err(Error::shape(
                op,
                format!("{:?} with column {:?}", self.value(x).shape(), self.value(col).shape()),
            ));
        }
        Ok((m, n))
    }

    /// Subtracts a per-row value (`m x 1`) from every entry of the row.
    pub fn sub_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.col_broadcast("sub_col", x, col)?;
        let c = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for (row, ci) in data.chunks_exact_mut(n).zip(c) {
            row.iter_mut().for_each(|v| *v -= ci);
        }
        Ok(self.record(Tensor::matrix(m, n, data), &[x, col], Op::SubCol(x, col)))
    }

    /// Divides every entry of row `i` by `col[i]`.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.col_broadcast("div_col", x, col)?;
        let c = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for (row, ci) in data.chunks_exact_mut(n).zip(c) {
            row.iter_mut().for_each(|v| *v /= ci);
        }
        Ok(self.record(Tensor::matrix(m, n, data), &[x, col], Op::DivCol(x, col)))
    }

    /// Leaky rectifier; `slope = 0` gives the plain ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.record(t, &[x], Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.record(t, &[x], Op::Exp(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / v);
        self.record(t, &[x], Op::Recip(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        Ok(self.record(Tensor::matrix(ra, ca + cb, data), &[a, b], Op::ConcatCols(a, b)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        Ok(self.record(Tensor::matrix(end - start, c, data), &[x], Op::SliceRows(x, start)))
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.record(Tensor::matrix(idx.len(), c, data), &[x], Op::GatherRows(x, idx.to_vec())))
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", format!("{:?} x{n}", self.value(x).shape())));
        }
        let row = self.value(x).data().to_vec();
        let data = row.repeat(n);
        Ok(self.record(Tensor::matrix(n, c, data), &[x], Op::RepeatRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.record(t, &[x], Op::Reshape(x)))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        self.record(Tensor::matrix(r, 1, data), &[x], Op::RowSum(x))
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        self.record(Tensor::matrix(r, 1, data), &[x], Op::RowMean(x))
    }

    /// Population standard deviation per row with the variance floored at `var_floor`.
    pub fn row_std(&mut self, x: Var, var_floor: f64) -> Var {
        let (r, c) = self.dims(x);
        let mut floored = Vec::with_capacity(r);
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|row| {
                let (_, var) = mean_var(row);
                floored.push(var <= var_floor);
                var.max(var_floor).sqrt()
            })
            .collect();
        self.record(Tensor::matrix(r, 1, data), &[x], Op::RowStd { x, floored })
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("row_softmax input contains NaN".into()));
        }
        let mut data = self.value(x).data().to_vec();
        data.chunks_exact_mut(c).for_each(softmax_in_place);
        Ok(self.record(Tensor::matrix(r, c, data), &[x], Op::RowSoftmax(x)))
    }

    fn pairwise(&mut self, a: Var, b: Var, squared: bool) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (m, d2) = self.dims(b);
        if d != d2 {
            return Err(Error::shape(
                "pairwise_dist",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &va[i * d..(i + 1) * d];
            for j in 0..m {
                let s = super::kernels::squared_distance(ai, &vb[j * d..(j + 1) * d]);
                data.push(if squared { s } else { s.sqrt() });
            }
        }
        let op = if squared {
            Op::PairwiseSqDist(a, b)
        } else {
            Op::PairwiseDist(a, b)
        };
        Ok(self.record(Tensor::matrix(n, m, data), &[a, b], op))
    }

    /// `D[i][j] = ||a_i - b_j||_2`. The gradient at a zero distance is taken as zero.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, false)
    }

    /// `D[i][j] = ||a_i - b_j||_2^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, true)
    }

    /// Max over consecutive groups of `k` rows: `(n*k) x d -> n x d`.
    /// Gradient goes to the first maximal element of each group.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if k == 0 || r % k != 0 {
            return Err(Error::shape("group_max", format!("{r} rows not divisible into groups of {k}")));
        }
        let n = r / k;
        let v = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..k {
                let src = (i * k + j) * c;
                for col in 0..c {
                    let val = v[src + col];
                    if j == 0 || val > data[i * c + col] {
                        data[i * c + col] = val;
                        argmax[i * c + col] = src + col;
                    }
                }
            }
        }
        Ok(self.record(Tensor::matrix(n, c, data), &[x], Op::GroupMax { x, argmax }))
    }

    /// `out[i, c] = max_j x[table.row(i)[j], c]`: a gather followed by a
    /// max over each row's `k` neighbours, without materializing the gather.
    /// Ties go to the earliest neighbour in the row.
    pub fn gather_max(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if k == 0 || idx.is_empty() || !idx.len().is_multiple_of(k) {
            return Err(Error::shape("gather_max", format!("{} indices not divisible into groups of {k}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_max", format!("index {bad} out of range for {r} rows")));
        }
        let n = idx.len() / k;
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for group in idx.chunks_exact(k) {
            let first = group[0] * c;
            data.extend_from_slice(&v[first..first + c]);
            argmax.extend(first..first + c);
            let (out, arg) = (data.len() - c, argmax.len() - c);
            for &src in &group[1..] {
                let row = &v[src * c..(src + 1) * c];
                for col in 0..c {
                    if row[col] > data[out + col] {
                        data[out + col] = row[col];
                        argmax[arg + col] = src * c + col;
                    }
                }
            }
        }
        Ok(self.record(Tensor::matrix(n, c, data), &[x], Op::GroupMax { x, argmax }))
    }

    /// Per-row minimum (`m x 1`), first minimal entry receives the gradient.
    pub fn row_min(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(r);
        let mut argmin = Vec::with_capacity(r);
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] < row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmin.push(i * c + best);
        }
        self.record(Tensor::matrix(r, 1, data), &[x], Op::RowMin { x, argmin })
    }

    /// Mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut data = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            add_into(&mut data, row);
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.record(Tensor::matrix(1, c, data), &[x], Op::MeanRows(x))
    }

    /// Max over rows: `n x d -> 1 x d`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.dims(x).0;
        self.group_max(x, r)
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.record(Tensor::scalar(s), &[x], Op::FrobeniusSq(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// `x W + b` for a weight `d_in x d_out` and bias of `d_out` values.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let b = g.constant(Tensor::matrix(2, 1, vec![1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::matrix(2, 2, vec![0.5, -1., 2., 3.]));
        let c = g.matmul(i, m).unwrap();
        assert_eq!(g.value(c).data(), g.value(m).data());
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_leaves_zero_grads() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::filled(&[2, 2], 1.5));
        let c = g.constant(Tensor::scalar(4.0));
        g.backward(c).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gives_unit_grad_and_loss_self_grad_is_one() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::filled(&[3, 2], 0.3));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(g.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::filled(&[2], 1.0));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_get_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2, 2], 2.0));
        let w = g.variable(Tensor::filled(&[2, 2], 1.0));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn row_softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 4, vec![1., 1., 1., 1., 0., 3f64.ln(), 0., 0.]));
        let y = g.row_softmax(x).unwrap();
        let v = g.value(y);
        for j in 0..4 {
            assert!((v.at(0, j) - 0.25).abs() < 1e-15);
        }
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::matrix(1, 2, vec![0., 3f64.ln()]));
        let y2 = g2.row_softmax(x2).unwrap();
        assert!((g2.value(y2).at(0, 0) - 0.25).abs() < 1e-15);
        assert!((g2.value(y2).at(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn row_softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]));
        assert!(matches!(g.row_softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn frobenius_of_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3]));
        let f = g.frobenius_sq(x);
        assert_eq!(g.value(f).item(), 0.0);
    }

    #[test]
    fn group_max_ties_go_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(4, 1, vec![2.0, 2.0, 1.0, 5.0]));
        let m = g.group_max(x, 2).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 5.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.gather_rows(x, &[0, 3]).is_err());
    }

    #[test]
    fn row_std_floor_on_constant_row() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(1, 3, vec![2.0, 2.0, 2.0]));
        let s = g.row_std(x, 1e-8);
        assert!((g.value(s).item() - 1e-4).abs() < 1e-18);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }
}
