//! Correspondence indicator: inverse-distance similarity, DeSmooth
//! normalization, a Sinkhorn baseline and hard quantization.

use crate::autograd::kernels::{mean_var, softmax_in_place};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Guards the inverse distance against identical feature rows.
pub const SIMILARITY_EPS: f64 = 1e-8;
/// Floor on the row variance used in standardization.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeSmoothConfig {
    /// Prior ratio scaling the standardized scores.
    pub t: f64,
    /// Dominance threshold on the scaled scores (diagnostics only).
    pub tau: f64,
    pub var_floor: f64,
}

impl Default for DeSmoothConfig {
    fn default() -> Self {
        DeSmoothConfig {
            t: 10.0,
            tau: 3.0,
            var_floor: VARIANCE_FLOOR,
        }
    }
}

impl DeSmoothConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!("prior ratio t must be positive, got {}", self.t)));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// Row-normalization applied to the similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalizer {
    DeSmooth(DeSmoothConfig),
    Sinkhorn { iterations: usize },
}

/// Soft correspondence with an optional hard row-argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMatrix {
    pub soft: Tensor,
    pub hard: Option<Vec<usize>>,
}

impl CorrMatrix {
    pub fn new(soft: Tensor) -> Self {
        CorrMatrix { soft, hard: None }
    }

    pub fn quantized(mut self) -> Self {
        self.hard = Some(quantize(&self.soft));
        self
    }
}

/// `p_ij = 1 / (||f_a,i - f_b,j|| + eps)`.
pub fn similarity(g: &mut Graph, fa: Var, fb: Var) -> Result<Var> {
    if g.value(fa).has_non_finite() || g.value(fb).has_non_finite() {
        return Err(Error::Numeric("non-finite features in similarity".into()));
    }
    let d = g.pairwise_dist(fa, fb)?;
    let d = g.add_scalar(d, SIMILARITY_EPS);
    Ok(g.recip(d))
}

/// Scaled row-standardized scores `t (s_ij - mu_i) / sigma_i`, before the softmax.
pub fn desmooth_scores(g: &mut Graph, s: Var, cfg: &DeSmoothConfig) -> Result<Var> {
    let mean = g.row_mean(s);
    let std = g.row_std(s, cfg.var_floor);
    let centered = g.sub_col(s, mean)?;
    let z = g.div_col(centered, std)?;
    Ok(g.scale(z, cfg.t))
}

/// Single-pass DeSmooth: standardize each row, scale by `t`, row softmax.
pub fn desmooth(g: &mut Graph, s: Var, cfg: &DeSmoothConfig) -> Result<Var> {
    let z = desmooth_scores(g, s, cfg)?;
    g.row_softmax(z)
}

/// Alternating column/row normalization of `exp(s)`; the last pass is row-wise.
pub fn sinkhorn(g: &mut Graph, s: Var, iterations: usize) -> Result<Var> {
    if iterations == 0 {
        return Err(Error::Contract("sinkhorn needs at least one iteration".into()));
    }
    let mut x = g.row_softmax(s)?;
    for _ in 0..iterations {
        let xt = g.transpose(x);
        let col_sums = g.row_sum(xt);
        let xt = g.div_col(xt, col_sums)?;
        x = g.transpose(xt);
        let row_sums = g.row_sum(x);
        x = g.div_col(x, row_sums)?;
    }
    Ok(x)
}

pub fn normalize(g: &mut Graph, s: Var, normalizer: &Normalizer) -> Result<Var> {
    match normalizer {
        Normalizer::DeSmooth(cfg) => desmooth(g, s, cfg),
        Normalizer::Sinkhorn { iterations } => sinkhorn(g, s, *iterations),
    }
}

/// Graph-free DeSmooth for inference and benchmarking.
pub fn desmooth_values(s: &Tensor, cfg: &DeSmoothConfig) -> Tensor {
    let (r, c) = s.dims2();
    let mut out = s.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let (mean, var) = mean_var(row);
        let k = cfg.t / var.max(cfg.var_floor).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * k);
        softmax_in_place(row);
    }
    Tensor::matrix(r, c, out)
}

/// Scaled standardized scores without a graph (the argument of the final softmax).
pub fn desmooth_score_values(s: &Tensor, cfg: &DeSmoothConfig) -> Tensor {
    let (r, c) = s.dims2();
    let mut out = s.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let (mean, var) = mean_var(row);
        let k = cfg.t / var.max(cfg.var_floor).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * k);
    }
    Tensor::matrix(r, c, out)
}

/// Graph-free Sinkhorn for benchmarking.
pub fn sinkhorn_values(s: &Tensor, iterations: usize) -> Tensor {
    let (r, c) = s.dims2();
    let mut x = s.data().to_vec();
    x.chunks_exact_mut(c).for_each(softmax_in_place);
    let mut col = vec![0.0; c];
    for _ in 0..iterations {
        col.iter_mut().for_each(|v| *v = 0.0);
        for row in x.chunks_exact(c) {
            for (a, v) in col.iter_mut().zip(row) {
                *a += v;
            }
        }
        for row in x.chunks_exact_mut(c) {
            for (v, a) in row.iter_mut().zip(&col) {
                *v /= a;
            }
        }
        for row in x.chunks_exact_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::matrix(r, c, x)
}

/// Row argmax, ties to the lower column.
pub fn quantize(soft: &Tensor) -> Vec<usize> {
    let c = soft.cols();
    soft.data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-row count of scaled scores at or above `tau`, with their mean and
/// population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DominanceStats {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl DominanceStats {
    /// `[mean - 3 std, mean + 3 std]`.
    pub fn three_sigma_band(&self) -> (f64, f64) {
        (self.mean - 3.0 * self.std, self.mean + 3.0 * self.std)
    }
}

pub fn dominance_stats(scores: &Tensor, tau: f64) -> DominanceStats {
    let c = scores.cols();
    let counts: Vec<usize> = scores
        .data()
        .chunks_exact(c)
        .map(|row| row.iter().filter(|&&z| z >= tau).count())
        .collect();
    let as_f: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
    let (mean, var) = mean_var(&as_f);
    DominanceStats {
        counts,
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// `(t, mean count)` for every scanned prior ratio.
    pub scan: Vec<(f64, f64)>,
    pub chosen_t: f64,
    /// False when no scanned `t` met the target and the fallback was used.
    pub calibrated: bool,
}

/// Smallest `t` in `1..=20` whose mean dominance count over `similarities`
/// lies in `[0.8, 1.2]`; falls back to `t = 10`.
pub fn calibrate_t(similarities: &[Tensor], tau: f64) -> Calibration {
    let mut scan = Vec::with_capacity(20);
    let mut chosen = None;
    for t in 1..=20 {
        let cfg = DeSmoothConfig {
            t: t as f64,
            tau,
            var_floor: VARIANCE_FLOOR,
        };
        let mut total = 0.0;
        let mut rows = 0usize;
        for s in similarities {
            let stats = dominance_stats(&desmooth_score_values(s, &cfg), tau);
            total += stats.mean * stats.counts.len() as f64;
            rows += stats.counts.len();
        }
        let mean = total / rows.max(1) as f64;
        scan.push((t as f64, mean));
        if chosen.is_none() && (0.8..=1.2).contains(&mean) {
            chosen = Some(t as f64);
        }
    }
    Calibration {
        scan,
        chosen_t: chosen.unwrap_or(DeSmoothConfig::default().t),
        calibrated: chosen.is_some(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(s: Tensor, cfg: DeSmoothConfig) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(s);
        let p = desmooth(&mut g, v, &cfg).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn constant_row_is_uniform() {
        let p = run(Tensor::matrix(1, 4, vec![3.0; 4]), DeSmoothConfig::default());
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dominant_entry_formula() {
        // row [2,1,1,1]: mean 1.25, population std sqrt(3)/4,
        // z = [sqrt 3, -1/sqrt 3, ...], p0 = 1 / (1 + 3 exp(-t * 4 / sqrt 3))
        let p = run(Tensor::matrix(1, 4, vec![2.0, 1.0, 1.0, 1.0]), DeSmoothConfig::default());
        let expect = 1.0 / (1.0 + 3.0 * (-10.0 * 4.0 / 3f64.sqrt()).exp());
        assert!((p.at(0, 0) - expect).abs() < 1e-14);
        assert!(p.at(0, 0) >= 0.99);
        for t in [0.1, 1.0, 5.0] {
            let p = run(
                Tensor::matrix(1, 4, vec![2.0, 1.0, 1.0, 1.0]),
                DeSmoothConfig { t, ..Default::default() },
            );
            assert_eq!(quantize(&p), vec![0]);
        }
    }

    #[test]
    fn graph_and_value_paths_agree() {
        let s = Tensor::matrix(2, 3, vec![0.3, 1.5, 0.2, 4.0, 4.0, 1.0]);
        let cfg = DeSmoothConfig::default();
        assert!(run(s.clone(), cfg).max_abs_diff(&desmooth_values(&s, &cfg)) < 1e-15);
    }

    #[test]
    fn similarity_values() {
        let mut g = Graph::new();
        let fa = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let fb = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let s = similarity(&mut g, fa, fb).unwrap();
        let v = g.value(s);
        assert!((v.at(0, 0) - 1e8).abs() < 1.0);
        assert!((v.at(0, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-7);
        assert_eq!(quantize(v), vec![0, 1]);
    }

    #[test]
    fn similarity_rejects_nan() {
        let mut g = Graph::new();
        let fa = g.constant(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]));
        let fb = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!(matches!(similarity(&mut g, fa, fb), Err(Error::Numeric(_))));
    }

    #[test]
    fn quantize_ties_and_identity() {
        assert_eq!(quantize(&Tensor::identity(4)), vec![0, 1, 2, 3]);
        assert_eq!(quantize(&Tensor::matrix(1, 3, vec![0.4, 0.4, 0.2])), vec![0]);
    }

    #[test]
    fn sinkhorn_fixed_point_and_identity_limit() {
        let d = Tensor::matrix(3, 3, vec![0.5, 0.3, 0.2, 0.3, 0.4, 0.3, 0.2, 0.3, 0.5]);
        let logd = Tensor::matrix(3, 3, d.data().iter().map(|v| v.ln()).collect());
        assert!(sinkhorn_values(&logd, 10).max_abs_diff(&d) < 1e-9);

        let mut s = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            s.data_mut()[i * 4 + i] = 20.0;
        }
        let p = sinkhorn_values(&s, 50);
        assert!(p.max_abs_diff(&Tensor::identity(4)) < 1e-6);
    }

    #[test]
    fn sinkhorn_graph_matches_values() {
        let s = Tensor::matrix(3, 3, vec![0.1, 2.0, -1.0, 0.5, 0.3, 0.9, -0.2, 1.1, 0.0]);
        let mut g = Graph::new();
        let v = g.constant(s.clone());
        let p = sinkhorn(&mut g, v, 7).unwrap();
        assert!(g.value(p).max_abs_diff(&sinkhorn_values(&s, 7)) < 1e-14);
    }

    #[test]
    fn dominance_separated_and_uniform() {
        let mut s = Tensor::filled(&[5, 6], 0.0);
        for i in 0..5 {
            s.data_mut()[i * 6 + i] = 10.0;
        }
        let st = dominance_stats(&s, 5.0);
        assert_eq!(st.counts, vec![1; 5]);
        assert_eq!(st.std, 0.0);
        let u = Tensor::filled(&[4, 4], 0.0);
        assert_eq!(dominance_stats(&u, 0.5).counts, vec![0; 4]);
    }
}
