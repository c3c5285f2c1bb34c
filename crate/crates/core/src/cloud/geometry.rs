//! Brute-force k-nearest neighbours and farthest point sampling.

use super::{dist_sq, PointCloud};
use crate::autograd::kernels::squared_distance;
use crate::error::{Error, Result};

/// Borrowed row-major matrix of `dim`-wide rows (points or feature vectors).
#[derive(Clone, Copy, Debug)]
pub struct Rows<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape("rows", format!("{} values with row width {dim}", data.len())));
        }
        Ok(Rows { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// `n x k` neighbour table stored flat: row `i` occupies `[i*k, (i+1)*k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// `[0,0,..,0, 1,1,..,1, ...]`, each centre index repeated `k` times.
    pub fn centers(&self) -> Vec<usize> {
        (0..self.len()).flat_map(|i| std::iter::repeat_n(i, self.k)).collect()
    }
}

fn nearest(query: &[f64], base: Rows<'_>, k: usize, skip: Option<usize>, scratch: &mut Vec<(f64, usize)>, out: &mut Vec<usize>) {
    scratch.clear();
    scratch.extend(
        (0..base.len())
            .filter(|&j| Some(j) != skip)
            .map(|j| (squared_distance(query, base.row(j)), j)),
    );
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    out.extend(scratch.iter().map(|&(_, j)| j));
}

/// For every query row, the `k` nearest base rows by Euclidean distance,
/// ascending, ties broken by lower index.
pub fn knn_indices(query: Rows<'_>, base: Rows<'_>, k: usize) -> Result<NeighborTable> {
    if query.dim != base.dim {
        return Err(Error::shape("knn", format!("row widths {} vs {}", query.dim, base.dim)));
    }
    if k == 0 || k >= base.len() {
        return Err(Error::Contract(format!("knn needs 0 < k < n, got k={k}, n={}", base.len())));
    }
    let mut scratch = Vec::with_capacity(base.len());
    let mut indices = Vec::with_capacity(query.len() * k);
    for i in 0..query.len() {
        nearest(query.row(i), base, k, None, &mut scratch, &mut indices);
    }
    Ok(NeighborTable { k, indices })
}

/// kNN of a set against itself, excluding each row from its own list.
pub fn knn_self(rows: Rows<'_>, k: usize) -> Result<NeighborTable> {
    let n = rows.len();
    if k == 0 || k >= n {
        return Err(Error::Contract(format!("knn needs 0 < k < n, got k={k}, n={n}")));
    }
    let mut scratch = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(n * k);
    for i in 0..n {
        nearest(rows.row(i), rows, k, Some(i), &mut scratch, &mut indices);
    }
    Ok(NeighborTable { k, indices })
}

pub fn knn_cloud(pc: &PointCloud, k: usize) -> Result<NeighborTable> {
    let flat = pc.flat();
    knn_self(Rows::new(&flat, 3)?, k)
}

/// Farthest point sampling seeded at index 0; ties go to the lower index.
pub fn fps_sample(pc: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("fps needs 1 <= m <= n, got m={m}, n={n}")));
    }
    let pts = pc.points();
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = 0;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best = None::<(f64, usize)>;
        for j in 0..n {
            let d = dist_sq(pts[j], c);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if !taken[j] && best.is_none_or(|(bd, _)| min_d[j] > bd) {
                best = Some((min_d[j], j));
            }
        }
        if let Some((_, j)) = best {
            current = j;
        }
    }
    Ok(chosen)
}
