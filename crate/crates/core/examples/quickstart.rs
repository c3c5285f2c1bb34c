//! Generate a few rigid pairs, train briefly, and score held-out predictions.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use corrnet3d::cloud::synth::{pair_dataset, PairKind, RigidParams};
use corrnet3d::eval::{default_tolerances, evaluate_model};
use corrnet3d::train::{train_with, TrainConfig};

fn main() -> corrnet3d::Result<()> {
    let kind = PairKind::Rigid(RigidParams::default());
    let train_pairs = pair_dataset(kind, 40, 64, 1)?;
    let held_out = pair_dataset(kind, 5, 64, 2)?;

    let cfg = TrainConfig {
        epochs: 5,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let outcome = train_with(&train_pairs, &cfg, |rec, _| {
        println!("epoch {:2}  loss {:10.3}", rec.epoch, rec.loss);
        Ok(())
    })?;

    let report = evaluate_model(&outcome.model, &held_out, &default_tolerances())?;
    println!("held-out Corr       {:6.2}%", 100.0 * report.strict);
    println!("held-out Corr @10%  {:6.2}%", 100.0 * report.at(0.10));
    println!("held-out Corr @20%  {:6.2}%", 100.0 * report.at(0.20));
    Ok(())
}
