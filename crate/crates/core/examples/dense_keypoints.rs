//! Dense correspondence on clouds larger than the network is trained for:
//! run the model on farthest-point key points, then extend to every point by
//! matching equal ranks inside corresponded clusters.

use std::time::Instant;

use corrnet3d::cloud::synth::{synth_rigid_pair, RigidParams, ShapeTemplate};
use corrnet3d::eval::{corr_strict, pseudo_cluster_correspond, ClusterMap, CorrReport, default_tolerances};
use corrnet3d::model::CorrNet3D;

fn main() -> corrnet3d::Result<()> {
    let base = ShapeTemplate::random(11).sample(4096, 12)?;
    let pair = synth_rigid_pair(&base, RigidParams::default(), 13)?;
    let model = CorrNet3D::with_defaults(0)?;

    let clusters = ClusterMap::build(&pair.source, 64)?;
    let sizes: Vec<usize> = clusters.members.iter().map(Vec::len).collect();
    println!(
        "64 clusters, sizes {}..{}",
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );

    let start = Instant::now();
    let dense = pseudo_cluster_correspond(&pair.source, &pair.target, 64, |a, b| {
        Ok(model.predict(a, b)?.hard.expect("quantized"))
    })?;
    println!("{} dense matches in {:.2}s", dense.len(), start.elapsed().as_secs_f64());

    let gt = pair.ground_truth.as_deref().expect("synthetic pairs carry ground truth");
    let report = CorrReport::new(&dense, gt, &pair.target, &default_tolerances())?;
    println!("strict {:.3}  @20% {:.3} (untrained weights)", corr_strict(&dense, gt)?, report.at(0.2));
    Ok(())
}
