//! Synthetic shapes and correspondence pairs with known ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{norm, Point, PointCloud, ShapePair};
use crate::error::Result;

pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rotate(r: &Rotation, p: Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn matmul3(a: &Rotation, b: &Rotation) -> Rotation {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation by Euler angles (radians) applied as `Rz * Ry * Rx`.
pub fn euler(x: f64, y: f64, z: f64) -> Rotation {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

/// How rigid pairs draw their rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RotationRange {
    /// Haar-uniform over all of SO(3).
    Full,
    /// Each Euler angle uniform in `[0, max]` degrees.
    PerAxis { max_degrees: f64 },
}

impl Default for RotationRange {
    fn default() -> Self {
        RotationRange::PerAxis { max_degrees: 45.0 }
    }
}

pub fn random_rotation<R: Rng>(rng: &mut R, range: RotationRange) -> Rotation {
    match range {
        RotationRange::Full => {
            // unit quaternion from four normals
            let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= n);
            let [w, x, y, z] = q;
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
                [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
                [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
            ]
        }
        RotationRange::PerAxis { max_degrees } => {
            let max = max_degrees.to_radians();
            let mut a = || if max > 0.0 { rng.random_range(0.0..max) } else { 0.0 };
            let (x, y, z) = (a(), a(), a());
            euler(x, y, z)
        }
    }
}

/// Parameters of a rigid pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidParams {
    pub rotation: RotationRange,
    /// Translation components are uniform in `[-max_translation, max_translation]`.
    pub max_translation: f64,
}

impl Default for RigidParams {
    fn default() -> Self {
        RigidParams {
            rotation: RotationRange::default(),
            max_translation: 0.5,
        }
    }
}

/// Places transformed source point `i` at target row `perm[i]`; `perm` becomes the ground truth.
fn shuffled_pair(base: &PointCloud, moved: Vec<Point>, perm: Vec<usize>) -> Result<ShapePair> {
    let mut target = vec![[0.0; 3]; moved.len()];
    for (i, p) in moved.into_iter().enumerate() {
        target[perm[i]] = p;
    }
    ShapePair::new(base.clone(), PointCloud::new(target)?, Some(perm))
}

fn random_perm<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Target is an explicit rigid motion of `base` with rows shuffled.
pub fn rigid_pair_with(base: &PointCloud, rotation: &Rotation, translation: Point, perm: Vec<usize>) -> Result<ShapePair> {
    let moved = base
        .points()
        .iter()
        .map(|p| {
            let q = rotate(rotation, *p);
            [q[0] + translation[0], q[1] + translation[1], q[2] + translation[2]]
        })
        .collect();
    shuffled_pair(base, moved, perm)
}

/// Random rotation, translation and row shuffle of a normalized base cloud.
pub fn synth_rigid_pair(base: &PointCloud, params: RigidParams, seed: u64) -> Result<ShapePair> {
    let mut rng = rng(seed);
    let r = random_rotation(&mut rng, params.rotation);
    let t = params.max_translation;
    let translation = if t > 0.0 {
        std::array::from_fn(|_| rng.random_range(-t..=t))
    } else {
        [0.0; 3]
    };
    let perm = random_perm(&mut rng, base.len());
    rigid_pair_with(base, &r, translation, perm)
}

/// Smooth sinusoidal bend plus row shuffle.
///
/// The displacement along the bend axis depends only on the other two
/// coordinates, so distinct points stay distinct.
pub fn synth_nonrigid_pair(base: &PointCloud, amplitude: f64, seed: u64) -> Result<ShapePair> {
    let mut rng = rng(seed);
    let axis = rng.random_range(0..3usize);
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let amp = amplitude * rng.random_range(0.5..=1.0);
    let freq_u = rng.random_range(0.5..1.5) * std::f64::consts::PI;
    let freq_v = rng.random_range(0.0..0.5) * std::f64::consts::PI;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let moved = base
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            q[axis] += amp * (freq_u * p[u] + freq_v * p[v] + phase).sin();
            q
        })
        .collect();
    let perm = random_perm(&mut rng, base.len());
    shuffled_pair(base, moved, perm)
}

#[derive(Clone, Debug)]
struct Ellipsoid {
    center: Point,
    radii: Point,
    rotation: Rotation,
}

impl Ellipsoid {
    fn area_weight(&self) -> f64 {
        // Knud Thomsen approximation
        let p = 1.6075;
        let [a, b, c] = self.radii;
        (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p)
    }
}

/// An asymmetric articulated blob: a body ellipsoid with several limbs.
///
/// Surface samples of a template stand in for scanned shapes.
#[derive(Clone, Debug)]
pub struct ShapeTemplate {
    parts: Vec<Ellipsoid>,
}

impl ShapeTemplate {
    pub fn random(seed: u64) -> Self {
        let mut rng = rng(seed);
        let mut parts = vec![Ellipsoid {
            center: [0.0; 3],
            radii: [0.55, 0.32, 0.22],
            rotation: IDENTITY,
        }];
        let limbs = rng.random_range(3..=5);
        for _ in 0..limbs {
            let dir: Point = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let len = norm(dir).max(1e-9);
            let dir = dir.map(|v| v / len);
            let reach = rng.random_range(0.45..0.75);
            let center = [dir[0] * reach * 1.1, dir[1] * reach * 0.7, dir[2] * reach * 0.6];
            let radii = [rng.random_range(0.25..0.45), rng.random_range(0.07..0.13), rng.random_range(0.07..0.13)];
            // align the long axis with the outward direction
            let yaw = dir[1].atan2(dir[0]);
            let pitch = -dir[2].asin();
            parts.push(Ellipsoid {
                center,
                radii,
                rotation: euler(0.0, pitch, yaw),
            });
        }
        ShapeTemplate { parts }
    }

    /// `n` surface samples, normalized to the unit ball.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let mut rng = rng(seed);
        let weights: Vec<f64> = self.parts.iter().map(Ellipsoid::area_weight).collect();
        let total: f64 = weights.iter().sum();
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pick = rng.random_range(0.0..total);
            let mut part = &self.parts[0];
            for (e, w) in self.parts.iter().zip(&weights) {
                part = e;
                if pick < *w {
                    break;
                }
                pick -= w;
            }
            let u: Point = loop {
                let g: Point = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let l = norm(g);
                if l > 1e-9 {
                    break g.map(|v| v / l);
                }
            };
            let local = [u[0] * part.radii[0], u[1] * part.radii[1], u[2] * part.radii[2]];
            let r = rotate(&part.rotation, local);
            points.push([r[0] + part.center[0], r[1] + part.center[1], r[2] + part.center[2]]);
        }
        PointCloud::new(points)?.normalize_unit()
    }
}

/// What a generated dataset contains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairKind {
    Rigid(RigidParams),
    /// Sinusoidal bend with the given amplitude.
    NonRigid { amplitude: f64 },
}

/// `count` pairs, each from its own random template; pair `i` depends only on `(seed, i)`.
pub fn pair_dataset(kind: PairKind, count: usize, n: usize, seed: u64) -> Result<Vec<ShapePair>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i.wrapping_mul(3));
            let base = ShapeTemplate::random(s).sample(n, s.wrapping_add(1))?;
            match kind {
                PairKind::Rigid(params) => synth_rigid_pair(&base, params, s.wrapping_add(2)),
                PairKind::NonRigid { amplitude } => synth_nonrigid_pair(&base, amplitude, s.wrapping_add(2)),
            }
        })
        .collect()
}
