//! Point clouds, shape pairs, file formats and geometric utilities.

pub mod geometry;
pub mod io;
pub mod synth;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An ordered list of 3D points. Row `i` of the matrix form is point `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub name: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Geometry(format!(
                "a point cloud needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Geometry(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(Error::shape("point cloud", format!("{} values is not a multiple of 3", data.len())));
        }
        PointCloud::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// `n x 3` tensor in point order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 3, self.flat())
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Points selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    /// Translates the centroid to the origin and scales so the farthest point has norm 1.
    pub fn normalize_unit(&self) -> Result<PointCloud> {
        let c = self.centroid();
        let centered: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_norm = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        if max_norm <= f64::EPSILON * (1.0 + norm(c)) {
            return Err(Error::Geometry("cannot normalize a cloud whose points all coincide".into()));
        }
        let points = centered.iter().map(|p| p.map(|v| v / max_norm)).collect();
        Ok(PointCloud {
            points,
            name: self.name.clone(),
        })
    }

    /// Largest pairwise Euclidean distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(dist(*a, *b));
            }
        }
        best
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn dist_sq(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn norm(p: Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// A bijection `i -> perm[i]` on `0..n`.
pub fn validate_bijection(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Contract(format!("correspondence has {} entries, expected {n}", perm.len())));
    }
    let mut seen = vec![false; n];
    for (i, &j) in perm.iter().enumerate() {
        if j >= n {
            return Err(Error::Contract(format!("entry {i} maps to {j}, out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::Contract(format!("target index {j} used twice; not a bijection")));
        }
    }
    Ok(())
}

/// Source and target clouds of equal size, optionally with ground truth.
///
/// `ground_truth[i] = j` means source point `i` corresponds to target point `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: Option<Vec<usize>>,
}

impl ShapePair {
    pub fn new(source: PointCloud, target: PointCloud, ground_truth: Option<Vec<usize>>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::Contract(format!(
                "pair clouds differ in size: {} vs {}",
                source.len(),
                target.len()
            )));
        }
        if let Some(gt) = &ground_truth {
            validate_bijection(gt, source.len())?;
        }
        Ok(ShapePair {
            source,
            target,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Both clouds centered and scaled to the unit ball independently.
    pub fn normalized(&self) -> Result<ShapePair> {
        Ok(ShapePair {
            source: self.source.normalize_unit()?,
            target: self.target.normalize_unit()?,
            ground_truth: self.ground_truth.clone(),
        })
    }
}
