//! Reconstruction, permutation and manifold losses, plus the supervised and
//! Chamfer alternatives.

use crate::autograd::{Graph, Tensor, Var};
use crate::cloud::geometry::NeighborTable;
use crate::cloud::validate_bijection;
use crate::error::{Error, Result};

/// Floor on squared neighbour distances in the manifold term.
pub const MANIFOLD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the permutation term.
    pub lambda_perm: f64,
    /// Weight of the manifold term.
    pub lambda_mfd: f64,
    /// Neighbours per point in the manifold term.
    pub k_mfd: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_perm: 0.1,
            lambda_mfd: 0.01,
            k_mfd: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_perm >= 0.0 && self.lambda_mfd >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.k_mfd == 0 {
            return Err(Error::Config("k_mfd must be positive".into()));
        }
        Ok(())
    }
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape())));
    }
    Ok(())
}

/// `||A - A~||_F^2 + ||B - B~||_F^2`.
pub fn loss_rec(g: &mut Graph, a: Var, a_rec: Var, b: Var, b_rec: Var) -> Result<Var> {
    check_same(g, "loss_rec", a, a_rec)?;
    check_same(g, "loss_rec", b, b_rec)?;
    let da = g.sub(a, a_rec)?;
    let db = g.sub(b, b_rec)?;
    let fa = g.frobenius_sq(da);
    let fb = g.frobenius_sq(db);
    g.add(fa, fb)
}

/// `||P P^T - I||_F^2`.
pub fn loss_perm(g: &mut Graph, p: Var) -> Result<Var> {
    let (n, m) = g.value(p).dims2();
    if n != m {
        return Err(Error::shape("loss_perm", format!("P must be square, got {n}x{m}")));
    }
    let pt = g.transpose(p);
    let ppt = g.matmul(p, pt)?;
    let eye = g.constant(Tensor::identity(n));
    let diff = g.sub(ppt, eye)?;
    Ok(g.frobenius_sq(diff))
}

/// Neighbourhoods and inverse squared distances of both input clouds.
#[derive(Clone, Debug)]
pub struct ManifoldNeighbors {
    pub source: NeighborTable,
    pub target: NeighborTable,
    source_weights: Tensor,
    target_weights: Tensor,
}

fn inverse_sq_weights(points: &Tensor, table: &NeighborTable, eps: f64) -> Tensor {
    let centers = table.centers();
    let mut w = Vec::with_capacity(3 * table.indices.len());
    for (&i, &k) in centers.iter().zip(&table.indices) {
        let d2: f64 = points.row(i).iter().zip(points.row(k)).map(|(x, y)| (x - y) * (x - y)).sum();
        let inv = 1.0 / d2.max(eps);
        w.extend_from_slice(&[inv; 3]);
    }
    Tensor::matrix(table.indices.len(), 3, w)
}

impl ManifoldNeighbors {
    /// `a`, `b` are the `n x 3` input clouds; neighbour tables come from coordinates.
    pub fn new(a: &Tensor, source: NeighborTable, b: &Tensor, target: NeighborTable) -> Self {
        ManifoldNeighbors {
            source_weights: inverse_sq_weights(a, &source, MANIFOLD_EPS),
            target_weights: inverse_sq_weights(b, &target, MANIFOLD_EPS),
            source,
            target,
        }
    }

    pub fn from_clouds(a: &Tensor, b: &Tensor, k: usize) -> Result<Self> {
        use crate::cloud::geometry::{knn_self, Rows};
        let ta = knn_self(Rows::new(a.data(), 3)?, k)?;
        let tb = knn_self(Rows::new(b.data(), 3)?, k)?;
        Ok(ManifoldNeighbors::new(a, ta, b, tb))
    }
}

fn neighbor_spread(g: &mut Graph, rows: Var, table: &NeighborTable, weights: &Tensor) -> Result<Var> {
    let centers = g.gather_rows(rows, &table.centers())?;
    let nbrs = g.gather_rows(rows, &table.indices)?;
    let diff = g.sub(centers, nbrs)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// Neighbouring source points should land on neighbouring targets (rows of
/// `P B`) and vice versa (rows of `P^T A`), each term scaled by the inverse
/// squared input distance. Summed over points and neighbours.
pub fn loss_mfd(g: &mut Graph, p: Var, a: Var, b: Var, nbrs: &ManifoldNeighbors) -> Result<Var> {
    let pb = g.matmul(p, b)?;
    let pt = g.transpose(p);
    let pta = g.matmul(pt, a)?;
    let s = neighbor_spread(g, pb, &nbrs.source, &nbrs.source_weights)?;
    let t = neighbor_spread(g, pta, &nbrs.target, &nbrs.target_weights)?;
    g.add(s, t)
}

/// Individual terms of the unsupervised objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: Var,
    pub perm: Var,
    pub mfd: Var,
    pub total: Var,
}

/// `L_rec + lambda_perm L_perm + lambda_mfd L_mfd`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    g: &mut Graph,
    a: Var,
    b: Var,
    a_rec: Var,
    b_rec: Var,
    p: Var,
    weights: &LossWeights,
    nbrs: &ManifoldNeighbors,
) -> Result<LossTerms> {
    let rec = loss_rec(g, a, a_rec, b, b_rec)?;
    let reg = regularizer(g, p, a, b, weights, nbrs)?;
    let total = g.add(rec, reg.0)?;
    Ok(LossTerms {
        rec,
        perm: reg.1,
        mfd: reg.2,
        total,
    })
}

/// `(lambda_perm L_perm + lambda_mfd L_mfd, L_perm, L_mfd)`.
pub fn regularizer(g: &mut Graph, p: Var, a: Var, b: Var, weights: &LossWeights, nbrs: &ManifoldNeighbors) -> Result<(Var, Var, Var)> {
    let perm = loss_perm(g, p)?;
    let mfd = loss_mfd(g, p, a, b, nbrs)?;
    let wp = g.scale(perm, weights.lambda_perm);
    let wm = g.scale(mfd, weights.lambda_mfd);
    let reg = g.add(wp, wm)?;
    Ok((reg, perm, mfd))
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance both ways.
pub fn loss_chamfer(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.pairwise_sq_dist(x, y)?;
    let (n, m) = g.value(d).dims2();
    let fwd = g.row_min(d);
    let dt = g.transpose(d);
    let bwd = g.row_min(dt);
    let fwd = g.sum(fwd);
    let bwd = g.sum(bwd);
    let fwd = g.scale(fwd, 1.0 / n as f64);
    let bwd = g.scale(bwd, 1.0 / m as f64);
    g.add(fwd, bwd)
}

/// Binary matrix with a 1 at `(i, gt[i])`.
pub fn permutation_matrix(gt: &[usize]) -> Tensor {
    let n = gt.len();
    let mut t = Tensor::zeros(&[n, n]);
    for (i, &j) in gt.iter().enumerate() {
        t.data_mut()[i * n + j] = 1.0;
    }
    t
}

/// `||P - P_gt||_F^2`.
pub fn loss_supervised(g: &mut Graph, p: Var, gt: &[usize]) -> Result<Var> {
    let (n, m) = g.value(p).dims2();
    if n != m {
        return Err(Error::shape("loss_supervised", format!("P must be square, got {n}x{m}")));
    }
    validate_bijection(gt, n)?;
    let target = g.constant(permutation_matrix(gt));
    let diff = g.sub(p, target)?;
    Ok(g.frobenius_sq(diff))
}
