//! Symmetric deformer: permute each cloud by the soft correspondence, then
//! map the permuted points to the other cloud conditioned on its global vector.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeformerMode {
    /// Per-point MLP on `[x, y, z, v]`.
    PointwiseMlp,
    /// Per-point MLP fed zeros instead of the global vector.
    NoGlobal,
    /// Fully connected: the flattened cloud plus `v` through an MLP, back to `n x 3`.
    FullyConnected,
}

/// Three linear layers; leaky rectifier after the first two, none after the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp3 {
    pub layers: [(ParamId, ParamId); 3],
    pub input_width: usize,
}

impl Mlp3 {
    pub fn register<R: Rng>(params: &mut ModelParams, prefix: &str, widths: [usize; 4], rng: &mut R) -> Result<Self> {
        let mut layer = |i: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                params.insert_weight(&format!("{prefix}.fc{}.weight", i + 1), widths[i], widths[i + 1], rng)?,
                params.insert_bias(&format!("{prefix}.fc{}.bias", i + 1), widths[i + 1])?,
            ))
        };
        Ok(Mlp3 {
            layers: [layer(0)?, layer(1)?, layer(2)?],
            input_width: widths[0],
        })
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, slope: f64) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, bound.var(*w), bound.var(*b))?;
            if i < 2 {
                h = g.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }
}

/// Deformer parameters; with `shared` both directions use the same MLP.
#[derive(Clone, Debug)]
pub struct DeformerParams {
    pub to_a: Mlp3,
    pub to_b: Mlp3,
    pub shared: bool,
    pub mode: DeformerMode,
    pub slope: f64,
}

impl DeformerParams {
    /// `points` is only used by the fully connected variant, whose layer sizes depend on it.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        params: &mut ModelParams,
        global_dim: usize,
        hidden: usize,
        mode: DeformerMode,
        shared: bool,
        points: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = match mode {
            DeformerMode::PointwiseMlp | DeformerMode::NoGlobal => [3 + global_dim, hidden, hidden, 3],
            DeformerMode::FullyConnected => [3 * points + global_dim, hidden, hidden, 3 * points],
        };
        let (to_a, to_b) = if shared {
            let m = Mlp3::register(params, "deformer", widths, rng)?;
            (m.clone(), m)
        } else {
            (
                Mlp3::register(params, "deformer.to_a", widths, rng)?,
                Mlp3::register(params, "deformer.to_b", widths, rng)?,
            )
        };
        Ok(DeformerParams {
            to_a,
            to_b,
            shared,
            mode,
            slope,
        })
    }
}

/// `(P^T A, P B)`: the source reordered to align with the target and vice versa.
pub fn permute_pair(g: &mut Graph, a: Var, b: Var, p: Var) -> Result<(Var, Var)> {
    let (n, m) = g.value(p).dims2();
    if g.value(a).rows() != n || g.value(b).rows() != m {
        return Err(Error::shape(
            "permute_pair",
            format!(
                "P {:?} with A {:?} and B {:?}",
                g.value(p).shape(),
                g.value(a).shape(),
                g.value(b).shape()
            ),
        ));
    }
    let pt = g.transpose(p);
    let a_hat = g.matmul(pt, a)?;
    let b_hat = g.matmul(p, b)?;
    Ok((a_hat, b_hat))
}

/// Maps a permuted `n x 3` cloud toward the cloud described by `global` (`1 x d`).
pub fn deform(g: &mut Graph, bound: &Bound, permuted: Var, global: Var, mlp: &Mlp3, mode: DeformerMode, slope: f64) -> Result<Var> {
    let (n, c) = g.value(permuted).dims2();
    if c != 3 {
        return Err(Error::shape("deform", format!("expected n x 3 points, got {:?}", g.value(permuted).shape())));
    }
    let global = match mode {
        DeformerMode::NoGlobal => {
            let d = g.value(global).numel();
            g.constant(Tensor::zeros(&[1, d]))
        }
        _ => global,
    };
    match mode {
        DeformerMode::PointwiseMlp | DeformerMode::NoGlobal => {
            let tiled = g.repeat_rows(global, n)?;
            let input = g.concat_cols(permuted, tiled)?;
            if g.value(input).cols() != mlp.input_width {
                return Err(Error::shape(
                    "deform",
                    format!("input width {} but MLP expects {}", g.value(input).cols(), mlp.input_width),
                ));
            }
            mlp.forward(g, bound, input, slope)
        }
        DeformerMode::FullyConnected => {
            let flat = g.reshape(permuted, &[1, 3 * n])?;
            let input = g.concat_cols(flat, global)?;
            if g.value(input).cols() != mlp.input_width {
                return Err(Error::shape(
                    "deform",
                    format!("fully connected deformer built for a different point count ({} inputs)", mlp.input_width),
                ));
            }
            let out = mlp.forward(g, bound, input, slope)?;
            g.reshape(out, &[n, 3])
        }
    }
}

/// Reconstructed `(A~, B~)`: `A~` from `P B` with `v_a`, `B~` from `P^T A` with `v_b`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_both(
    g: &mut Graph,
    bound: &Bound,
    a: Var,
    b: Var,
    p: Var,
    v_a: Var,
    v_b: Var,
    params: &DeformerParams,
) -> Result<(Var, Var)> {
    let (a_hat, b_hat) = permute_pair(g, a, b, p)?;
    let a_rec = deform(g, bound, b_hat, v_a, &params.to_a, params.mode, params.slope)?;
    let b_rec = deform(g, bound, a_hat, v_b, &params.to_b, params.mode, params.slope)?;
    Ok((a_rec, b_rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::synth::rng;

    fn random(r: usize, c: usize, seed: u64) -> Tensor {
        let mut g = rng(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect())
    }

    fn deformer(shared: bool, mode: DeformerMode) -> (ModelParams, DeformerParams) {
        let mut p = ModelParams::new();
        let d = DeformerParams::register(&mut p, 4, 8, mode, shared, 5, 0.2, &mut rng(1)).unwrap();
        (p, d)
    }

    #[test]
    fn identity_permutation_keeps_clouds() {
        let mut g = Graph::new();
        let a = g.constant(random(5, 3, 1));
        let b = g.constant(random(5, 3, 2));
        let p = g.constant(Tensor::identity(5));
        let (ah, bh) = permute_pair(&mut g, a, b, p).unwrap();
        assert_eq!(g.value(ah), g.value(a));
        assert_eq!(g.value(bh), g.value(b));
    }

    #[test]
    fn exact_permutation_reorders_rows() {
        let perm = [2, 0, 3, 1];
        let mut pm = Tensor::zeros(&[4, 4]);
        for (i, &j) in perm.iter().enumerate() {
            pm.data_mut()[i * 4 + j] = 1.0;
        }
        let a_t = random(4, 3, 3);
        let mut g = Graph::new();
        let a = g.constant(a_t.clone());
        let b = g.constant(random(4, 3, 4));
        let p = g.constant(pm);
        let (ah, _) = permute_pair(&mut g, a, b, p).unwrap();
        // row j of P^T A is the source point matched to target j
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(g.value(ah).row(j), a_t.row(i));
        }
    }

    #[test]
    fn uniform_permutation_gives_centroid() {
        let b_t = random(4, 3, 5);
        let mut g = Graph::new();
        let a = g.constant(random(4, 3, 6));
        let b = g.constant(b_t.clone());
        let p = g.constant(Tensor::filled(&[4, 4], 0.25));
        let (_, bh) = permute_pair(&mut g, a, b, p).unwrap();
        let c: Vec<f64> = (0..3).map(|k| (0..4).map(|i| b_t.at(i, k)).sum::<f64>() / 4.0).collect();
        for i in 0..4 {
            for k in 0..3 {
                assert!((g.value(bh).at(i, k) - c[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deform_shape_pointwise_and_zero_weights() {
        let (mut params, d) = deformer(true, DeformerMode::PointwiseMlp);
        let mut pts = random(5, 3, 7);
        let row0 = pts.row(0).to_vec();
        pts.data_mut()[6..9].copy_from_slice(&row0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(pts.clone());
        let v = g.constant(random(1, 4, 8));
        let y = deform(&mut g, &bound, x, v, &d.to_a, d.mode, d.slope).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 3]);
        assert_eq!(g.value(y).row(0), g.value(y).row(2));

        let beta = [0.3, -0.7, 1.25];
        for (w, b) in &d.to_a.layers {
            params.get_mut(*w).data_mut().iter_mut().for_each(|x| *x = 0.0);
            params.get_mut(*b).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        params.get_mut(d.to_a.layers[2].1).data_mut().copy_from_slice(&beta);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(pts);
        let v = g.constant(random(1, 4, 8));
        let y = deform(&mut g, &bound, x, v, &d.to_a, d.mode, d.slope).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, beta);
        }
    }

    #[test]
    fn swapping_the_pair_swaps_reconstructions() {
        let (params, d) = deformer(true, DeformerMode::PointwiseMlp);
        let (a_t, b_t) = (random(5, 3, 1), random(5, 3, 2));
        let p_t = random(5, 5, 3);
        let (va_t, vb_t) = (random(1, 4, 4), random(1, 4, 5));

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (a, b, p) = (g.constant(a_t.clone()), g.constant(b_t.clone()), g.constant(p_t.clone()));
        let (va, vb) = (g.constant(va_t.clone()), g.constant(vb_t.clone()));
        let (ar, br) = reconstruct_both(&mut g, &bound, a, b, p, va, vb, &d).unwrap();
        let (a2, b2, p2) = (g.constant(b_t), g.constant(a_t), g.constant(p_t.transposed()));
        let (va2, vb2) = (g.constant(vb_t), g.constant(va_t));
        let (ar2, br2) = reconstruct_both(&mut g, &bound, a2, b2, p2, va2, vb2, &d).unwrap();
        assert!(g.value(ar).max_abs_diff(g.value(br2)) < 1e-12);
        assert!(g.value(br).max_abs_diff(g.value(ar2)) < 1e-12);
    }

    #[test]
    fn reconstruction_error_reaches_p() {
        let (params, d) = deformer(true, DeformerMode::PointwiseMlp);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let a = g.constant(random(5, 3, 1));
        let b = g.constant(random(5, 3, 2));
        let p = g.variable(random(5, 5, 3));
        let va = g.constant(random(1, 4, 4));
        let vb = g.constant(random(1, 4, 5));
        let (ar, _) = reconstruct_both(&mut g, &bound, a, b, p, va, vb, &d).unwrap();
        let diff = g.sub(a, ar).unwrap();
        let loss = g.frobenius_sq(diff);
        g.backward(loss).unwrap();
        assert!(g.grad(p).unwrap().iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn shared_parameters_are_one_set() {
        let (p_shared, d) = deformer(true, DeformerMode::PointwiseMlp);
        assert_eq!(d.to_a.layers, d.to_b.layers);
        let (p_split, d2) = deformer(false, DeformerMode::PointwiseMlp);
        assert_ne!(d2.to_a.layers, d2.to_b.layers);
        assert_eq!(p_split.num_scalars(), 2 * p_shared.num_scalars());
    }

    #[test]
    fn ablation_modes_run() {
        for mode in [DeformerMode::NoGlobal, DeformerMode::FullyConnected] {
            let (params, d) = deformer(true, mode);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.constant(random(5, 3, 1));
            let v = g.constant(random(1, 4, 2));
            let y = deform(&mut g, &bound, x, v, &d.to_a, d.mode, d.slope).unwrap();
            assert_eq!(g.value(y).shape(), &[5, 3]);
        }
    }
}
