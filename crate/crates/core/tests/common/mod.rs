//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use corrnet3d::cloud::synth::{pair_dataset, rng, PairKind, RigidParams};
use corrnet3d::model::ArchConfig;
use corrnet3d::train::TrainConfig;
use corrnet3d::{Graph, ShapePair, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// ‖a − n‖ / max(‖a‖, ‖n‖).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> corrnet3d::Result<Var> + 'a;

/// Central-difference check of `f` with respect to every input; returns the
/// worst relative error.
pub fn gradcheck(inputs: &[Tensor], f: &Build) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf grad").to_vec();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= FD_STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum giving every element a distinct upstream gradient.
pub fn wsum(g: &mut Graph, x: Var) -> corrnet3d::Result<Var> {
    let t = g.value(x);
    let w: Vec<f64> = (0..t.numel()).map(|i| 0.3 + 0.17 * ((i * 7 % 11) as f64)).collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![8, 8, 12],
        k: 4,
        hidden: 16,
        ..ArchConfig::default()
    }
}

pub fn rigid_pairs(count: usize, n: usize, seed: u64) -> Vec<ShapePair> {
    pair_dataset(PairKind::Rigid(RigidParams::default()), count, n, seed).expect("synthetic pairs")
}

/// A tiny, fast configuration for plumbing tests.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr: 1e-3,
        arch: small_arch(),
        ..TrainConfig::default()
    }
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn random_stochastic(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data: Vec<f64> = (0..n * n).map(|_| r.random_range(0.05..1.0)).collect();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(n, n, data)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    rng(seed)
}

/// Brute-force Chamfer: mean nearest squared distance both ways.
pub fn chamfer_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let one_way = |p: &Tensor, q: &Tensor| {
        (0..p.rows())
            .map(|i| {
                (0..q.rows())
                    .map(|j| (0..3).map(|c| (p.at(i, c) - q.at(j, c)).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / p.rows() as f64
    };
    one_way(x, y) + one_way(y, x)
}

/// The explicit matrix form of strict Corr: ‖P̂ ⊙ P_gt‖₁ / n.
pub fn corr_matrix_formula(pred: &[usize], gt: &[usize]) -> f64 {
    let n = pred.len();
    let mut hits = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = f64::from(u8::from(pred[i] == j));
            let q = f64::from(u8::from(gt[i] == j));
            hits += p * q;
        }
    }
    hits / n as f64
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}
