//! DeSmooth versus Sinkhorn: what each does to a similarity matrix, and how
//! long each takes as the matrix grows.

use corrnet3d::cloud::synth::rng;
use corrnet3d::eval::bench_normalizers;
use corrnet3d::indicator::{desmooth_score_values, desmooth_values, dominance_stats, sinkhorn_values, DeSmoothConfig};
use corrnet3d::Tensor;
use rand::Rng;

fn max_col_error(m: &Tensor) -> f64 {
    let (r, c) = m.dims2();
    (0..c)
        .map(|j| ((0..r).map(|i| m.at(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn main() -> corrnet3d::Result<()> {
    let mut r = rng(3);
    let n = 64;
    let s = Tensor::matrix(n, n, (0..n * n).map(|_| r.random_range(0.5..2.0)).collect());
    let cfg = DeSmoothConfig::default();

    let d = desmooth_values(&s, &cfg);
    let k = sinkhorn_values(&s, 30);
    let peak = |m: &Tensor| (0..n).map(|i| m.row(i).iter().cloned().fold(0.0, f64::max)).sum::<f64>() / n as f64;
    println!("mean row peak    desmooth {:.3}   sinkhorn {:.3}", peak(&d), peak(&k));
    println!("max |col sum-1|  desmooth {:.3}   sinkhorn {:.2e}", max_col_error(&d), max_col_error(&k));

    let stats = dominance_stats(&desmooth_score_values(&s, &cfg), cfg.tau);
    let (lo, hi) = stats.three_sigma_band();
    println!("entries above tau={} per row: mean {:.2}, 3-sigma band [{:.2}, {:.2}]", cfg.tau, stats.mean, lo, hi);

    println!("\n{:>6} {:>12} {:>12} {:>7}", "n", "desmooth s", "sinkhorn s", "ratio");
    let rows = bench_normalizers(&[128, 256, 512], 30, 5, 0)?;
    for pair in rows.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        println!("{:>6} {:>12.6} {:>12.6} {:>7.1}", a.n, a.median_seconds, b.median_seconds, b.median_seconds / a.median_seconds);
    }
    Ok(())
}
