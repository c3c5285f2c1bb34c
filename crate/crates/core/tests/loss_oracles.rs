mod common;

use common::{all_permutations, chamfer_oracle, rand_t, random_stochastic, seeded};
use corrnet3d::cloud::synth::{euler, rigid_pair_with};
use corrnet3d::cloud::PointCloud;
use corrnet3d::losses::{
    loss_chamfer, loss_mfd, loss_perm, loss_supervised, loss_total, permutation_matrix, LossWeights, ManifoldNeighbors,
};
use corrnet3d::{Graph, Tensor};
use proptest::prelude::*;

fn mfd_value(p: &Tensor, a: &Tensor, b: &Tensor, nbrs: &ManifoldNeighbors) -> f64 {
    let mut g = Graph::new();
    let (p, a, b) = (g.constant(p.clone()), g.constant(a.clone()), g.constant(b.clone()));
    let l = loss_mfd(&mut g, p, a, b, nbrs).unwrap();
    g.value(l).item()
}

/// Evaluates the manifold loss of every bijection between a rigidly moved,
/// shuffled copy of `points`; returns (ground truth value, all values by permutation).
fn enumerate(points: Vec<[f64; 3]>, k: usize) -> (Vec<usize>, f64, Vec<(Vec<usize>, f64)>) {
    let base = PointCloud::new(points).unwrap();
    let gt = vec![4, 0, 5, 2, 1, 3];
    let pair = rigid_pair_with(&base, &euler(0.3, -0.2, 0.9), [0.5, 0.1, -0.4], gt.clone()).unwrap();
    let (a, b) = (pair.source.to_tensor(), pair.target.to_tensor());
    let nbrs = ManifoldNeighbors::from_clouds(&a, &b, k).unwrap();
    let at_gt = mfd_value(&permutation_matrix(&gt), &a, &b, &nbrs);
    let all = all_permutations(6)
        .into_iter()
        .map(|perm| {
            let v = mfd_value(&permutation_matrix(&perm), &a, &b, &nbrs);
            (perm, v)
        })
        .collect();
    (gt, at_gt, all)
}

#[test]
fn hexagon_ground_truth_minimizes_over_all_720() {
    let hex: Vec<[f64; 3]> = (0..6)
        .map(|i| {
            let t = std::f64::consts::PI / 3.0 * i as f64;
            [t.cos(), t.sin(), 0.0]
        })
        .collect();
    let (gt, at_gt, all) = enumerate(hex, 2);
    assert_eq!(all.len(), 720);
    // every neighbour term equals one at the ground truth
    assert!((at_gt - 2.0 * 6.0 * 2.0).abs() < 1e-9, "{at_gt}");
    let min = all.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    assert!((min - at_gt).abs() < 1e-9);
    // the minimizers are exactly the 12 symmetries of the hexagon composed with the ground truth
    let minimizers: Vec<&Vec<usize>> = all.iter().filter(|(_, v)| (v - min).abs() < 1e-9).map(|(p, _)| p).collect();
    assert_eq!(minimizers.len(), 12);
    assert!(minimizers.contains(&&gt));
    let inv = {
        let mut inv = vec![0; 6];
        for (i, &j) in gt.iter().enumerate() {
            inv[j] = i;
        }
        inv
    };
    for m in minimizers {
        // m ∘ gt⁻¹ must map hexagon edges to edges
        let sym: Vec<usize> = (0..6).map(|i| inv[m[i]]).collect();
        for i in 0..6 {
            let d = (sym[i] + 6 - sym[(i + 1) % 6]) % 6;
            assert!(d == 1 || d == 5, "{m:?} breaks an edge");
        }
    }
}

#[test]
fn paired_points_minimizers_keep_partners_together() {
    let pts = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [6.0, 0.0, 0.0],
        [6.0, 1.0, 0.0],
        [0.0, 7.0, 2.0],
        [0.0, 7.0, 3.0],
    ];
    let partner = [1, 0, 3, 2, 5, 4];
    let (gt, at_gt, all) = enumerate(pts, 1);
    let min = all.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    assert!((min - at_gt).abs() < 1e-9);
    for (perm, v) in &all {
        // perm ∘ gt⁻¹ keeps partners together exactly when perm is a minimizer
        let keeps = (0..6).all(|i| {
            let j = perm[i];
            let partner_image = perm[partner[i]];
            let gi = gt.iter().position(|&x| x == j).unwrap();
            let gp = gt.iter().position(|&x| x == partner_image).unwrap();
            partner[gi] == gp
        });
        assert_eq!(keeps, (v - min).abs() < 1e-9, "{perm:?} -> {v}");
    }
}

#[test]
fn fixed_loss_oracles() {
    let mut g = Graph::new();
    let j = g.constant(Tensor::filled(&[4, 4], 0.25));
    let l = loss_perm(&mut g, j).unwrap();
    assert!((g.value(l).item() - 3.0).abs() <= 1e-12);
    let j = g.constant(Tensor::filled(&[4, 4], 0.25));
    let s = loss_supervised(&mut g, j, &[2, 0, 3, 1]).unwrap();
    assert!((g.value(s).item() - 3.0).abs() <= 1e-12);
    let p = g.constant(permutation_matrix(&[2, 0, 3, 1]));
    let l = loss_perm(&mut g, p).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn chamfer_matches_brute_force() {
    for seed in 0..10 {
        let mut r = seeded(seed);
        let x = rand_t(&mut r, 17, 3);
        let y = rand_t(&mut r, 17, 3);
        let mut g = Graph::new();
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let l = loss_chamfer(&mut g, vx, vy).unwrap();
        assert!((g.value(l).item() - chamfer_oracle(&x, &y)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_loss_is_nonnegative(seed in any::<u64>(), l1 in 0.0..2.0f64, l2 in 0.0..2.0f64) {
        let mut r = seeded(seed);
        let n = 12;
        let (a, b) = (rand_t(&mut r, n, 3), rand_t(&mut r, n, 3));
        let (ar, br) = (rand_t(&mut r, n, 3), rand_t(&mut r, n, 3));
        let p = random_stochastic(&mut r, n);
        let w = LossWeights { lambda_perm: l1, lambda_mfd: l2, k_mfd: 3 };
        let nbrs = ManifoldNeighbors::from_clouds(&a, &b, 3).unwrap();
        let mut g = Graph::new();
        let vars: Vec<_> = [a, b, ar, br, p].into_iter().map(|t| g.constant(t)).collect();
        let t = loss_total(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], &w, &nbrs).unwrap();
        prop_assert!(g.value(t.total).item() >= 0.0);
    }

    #[test]
    fn perm_loss_vanishes_only_on_permutations(seed in any::<u64>(), n in 3usize..10) {
        let mut r = seeded(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let mut g = Graph::new();
        let p = g.constant(permutation_matrix(&perm));
        let l = loss_perm(&mut g, p).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
        let s = g.constant(random_stochastic(&mut r, n));
        let l = loss_perm(&mut g, s).unwrap();
        prop_assert!(g.value(l).item() >= 1e-2);
    }

    #[test]
    fn chamfer_ignores_row_order(seed in any::<u64>()) {
        let mut r = seeded(seed);
        let x = rand_t(&mut r, 9, 3);
        let y = rand_t(&mut r, 11, 3);
        let mut order: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let (vx, vs, vy) = (g.constant(x), g.constant(shuffled), g.constant(y));
        let a = loss_chamfer(&mut g, vx, vy).unwrap();
        let b = loss_chamfer(&mut g, vs, vy).unwrap();
        prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }
}
