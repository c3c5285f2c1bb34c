//! Trains the same data under each objective and compares held-out accuracy:
//! the full unsupervised loss, reconstruction alone, Chamfer reconstruction
//! with the regularizers, and the supervised loss as a reference.
//!
//! ```text
//! cargo run --release --example loss_ablation -- [pairs] [epochs]
//! ```

use corrnet3d::cloud::synth::{pair_dataset, PairKind, RigidParams};
use corrnet3d::eval::{default_tolerances, evaluate_model};
use corrnet3d::train::{train, TrainConfig, TrainMode};

fn main() -> corrnet3d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(50);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);

    let kind = PairKind::Rigid(RigidParams::default());
    let train_pairs = pair_dataset(kind, pairs, 128, 1)?;
    let held_out = pair_dataset(kind, 20, 128, 2)?;
    let tols = default_tolerances();

    println!("{:<14} {:>8} {:>8} {:>8}", "objective", "strict", "@10%", "@20%");
    for mode in [TrainMode::Unsupervised, TrainMode::RecOnly, TrainMode::Chamfer, TrainMode::Supervised] {
        let cfg = TrainConfig {
            mode,
            epochs,
            ..TrainConfig::default()
        };
        let outcome = train(&train_pairs, &cfg)?;
        let r = evaluate_model(&outcome.model, &held_out, &tols)?;
        println!("{:<14} {:>8.3} {:>8.3} {:>8.3}", mode.as_str(), r.strict, r.at(0.1), r.at(0.2));
    }
    Ok(())
}
