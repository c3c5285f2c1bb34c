//! EdgeConv feature embedding with max+mean global pooling.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::cloud::geometry::{knn_self, Rows};
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams, ParamId};

/// Per-point features `n x d` and the permutation-invariant global vector `1 x d`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSet {
    pub pointwise: Var,
    pub global: Var,
}

/// One EdgeConv layer: a single linear map on `(f_i, f_j - f_i)` followed by
/// the leaky rectifier, max-pooled over the `k` feature-space neighbours.
#[derive(Clone, Debug)]
pub struct EdgeConvLayer {
    /// `2 d_in x d_out`; rows `0..d_in` act on `f_i`, the rest on `f_j - f_i`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
}

impl EdgeConvLayer {
    pub fn register<R: Rng>(params: &mut ModelParams, prefix: &str, d_in: usize, d_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        Ok(EdgeConvLayer {
            weight: params.insert_weight(&format!("{prefix}.weight"), 2 * d_in, d_out, rng)?,
            bias: params.insert_bias(&format!("{prefix}.bias"), d_out)?,
            d_in,
            d_out,
            k,
        })
    }

    /// Neighbours are recomputed from the current feature values and treated
    /// as constants for differentiation.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, features: Var, slope: f64) -> Result<Var> {
        let (n, d) = g.value(features).dims2();
        if d != self.d_in {
            return Err(Error::shape("edgeconv", format!("expected width {}, got {d}", self.d_in)));
        }
        if self.k >= n {
            return Err(Error::Contract(format!("edgeconv needs k < n, got k={}, n={n}", self.k)));
        }
        let nbrs = knn_self(Rows::new(g.value(features).data(), d)?, self.k)?;

        // W_c f_i + W_e (f_j - f_i) = (W_c - W_e) f_i + W_e f_j. Only the
        // second term varies over neighbours and the rectifier is increasing,
        // so the max over edges reduces to a max over neighbour rows of W_e f_j.
        let w = bound.var(self.weight);
        let w_center = g.slice_rows(w, 0, d)?;
        let w_edge = g.slice_rows(w, d, 2 * d)?;
        let center = g.matmul(features, w_center)?;
        let nbr = g.matmul(features, w_edge)?;
        let center = g.sub(center, nbr)?;
        let best = g.gather_max(nbr, &nbrs.indices, self.k)?;
        let pre = g.add(center, best)?;
        let pre = g.add_row(pre, bound.var(self.bias))?;
        Ok(g.leaky_relu(pre, slope))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub layers: Vec<EdgeConvLayer>,
    pub global_weight: ParamId,
    pub global_bias: ParamId,
    pub slope: f64,
}

impl Embedding {
    /// `widths` lists every layer's output width; the input width is 3.
    pub fn register<R: Rng>(params: &mut ModelParams, widths: &[usize], k: usize, slope: f64, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d_in = 3;
        for (l, &d_out) in widths.iter().enumerate() {
            layers.push(EdgeConvLayer::register(params, &format!("embed.layer{}", l + 1), d_in, d_out, k, rng)?);
            d_in = d_out;
        }
        let d = d_in;
        Ok(Embedding {
            layers,
            global_weight: params.insert_weight("embed.global.weight", 2 * d, d, rng)?,
            global_bias: params.insert_bias("embed.global.bias", d)?,
            slope,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(3, |l| l.d_out)
    }

    /// Runs the EdgeConv stack on an `n x 3` coordinate matrix.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, points: Var) -> Result<FeatureSet> {
        let mut f = points;
        for layer in &self.layers {
            f = layer.forward(g, bound, f, self.slope)?;
        }
        let max = g.max_rows(f)?;
        let mean = g.mean_rows(f);
        let pooled = g.concat_cols(max, mean)?;
        let global = g.linear(pooled, bound.var(self.global_weight), bound.var(self.global_bias))?;
        Ok(FeatureSet { pointwise: f, global })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::cloud::synth::rng;
    use rand::seq::SliceRandom;

    fn random_points(n: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::matrix(n, 3, (0..3 * n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Literal `max_j M(concat(f_i, f_j - f_i))` evaluation.
    fn reference_edgeconv(w: &Tensor, b: &Tensor, f: &Tensor, k: usize, slope: f64) -> Vec<f64> {
        let (n, d) = f.dims2();
        let d_out = w.cols();
        let nbrs = knn_self(Rows::new(f.data(), d).unwrap(), k).unwrap();
        let mut out = vec![f64::NEG_INFINITY; n * d_out];
        for i in 0..n {
            for &j in nbrs.row(i) {
                let mut input = f.row(i).to_vec();
                input.extend(f.row(j).iter().zip(f.row(i)).map(|(a, c)| a - c));
                for o in 0..d_out {
                    let mut s = b.data()[o];
                    for (r, x) in input.iter().enumerate() {
                        s += x * w.at(r, o);
                    }
                    let s = if s > 0.0 { s } else { slope * s };
                    out[i * d_out + o] = out[i * d_out + o].max(s);
                }
            }
        }
        out
    }

    #[test]
    fn factorized_form_matches_literal_concat() {
        let mut params = ModelParams::new();
        let mut r = rng(0);
        let layer = EdgeConvLayer::register(&mut params, "l", 3, 8, 4, &mut r).unwrap();
        params.get_mut(layer.bias).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        let pts = random_points(20, 1);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(pts.clone());
        let y = layer.forward(&mut g, &bound, x, 0.2).unwrap();
        let expect = reference_edgeconv(params.get(layer.weight), params.get(layer.bias), &pts, 4, 0.2);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut params = ModelParams::new();
        let mut r = rng(0);
        let layer = EdgeConvLayer::register(&mut params, "l", 3, 5, 3, &mut r).unwrap();
        params.get_mut(layer.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias = [0.5, -1.0, 2.0, 0.0, 0.25];
        params.get_mut(layer.bias).data_mut().copy_from_slice(&bias);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(random_points(10, 2));
        let y = layer.forward(&mut g, &bound, x, 0.2).unwrap();
        assert_eq!(g.value(y).shape(), &[10, 5]);
        for row in g.value(y).data().chunks(5) {
            // the leaky rectifier is applied inside the MLP
            let expect: Vec<f64> = bias.iter().map(|&b| if b > 0.0 { b } else { 0.2 * b }).collect();
            assert_eq!(row, expect.as_slice());
        }
    }

    #[test]
    fn k_must_be_below_n() {
        let mut params = ModelParams::new();
        let layer = EdgeConvLayer::register(&mut params, "l", 3, 4, 5, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(random_points(5, 0));
        assert!(layer.forward(&mut g, &bound, x, 0.2).is_err());
    }

    #[test]
    fn equivariant_pointwise_invariant_global() {
        let mut params = ModelParams::new();
        let emb = Embedding::register(&mut params, &[16, 16, 12], 5, 0.2, &mut rng(3)).unwrap();
        let pts = random_points(30, 4);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut rng(5));
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| pts.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(pts);
        let xp = g.constant(permuted);
        let f = emb.forward(&mut g, &bound, x).unwrap();
        let fp = emb.forward(&mut g, &bound, xp).unwrap();
        let (fv, fpv) = (g.value(f.pointwise), g.value(fp.pointwise));
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in fpv.row(r).iter().zip(fv.row(src)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(g.value(f.global).max_abs_diff(g.value(fp.global)) < 1e-5);
    }

    #[test]
    fn features_respond_to_displacement() {
        let mut params = ModelParams::new();
        let emb = Embedding::register(&mut params, &[16, 16, 12], 5, 0.2, &mut rng(3)).unwrap();
        let pts = random_points(30, 4);
        let mut moved = pts.clone();
        moved.data_mut()[0] += 0.1;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(pts.clone());
        let x2 = g.constant(pts);
        let xm = g.constant(moved);
        let f = emb.forward(&mut g, &bound, x).unwrap();
        let f2 = emb.forward(&mut g, &bound, x2).unwrap();
        let fm = emb.forward(&mut g, &bound, xm).unwrap();
        assert_eq!(g.value(f.pointwise), g.value(f2.pointwise));
        assert!(g.value(f.pointwise).max_abs_diff(g.value(fm.pointwise)) > 1e-6);
    }
}
