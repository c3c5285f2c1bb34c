//! Supervised mode: the correspondence matrix is fitted directly to the
//! ground-truth permutation, with no deformer involved. A handful of pairs is
//! memorized almost perfectly.

use corrnet3d::cloud::synth::{pair_dataset, PairKind, RigidParams};
use corrnet3d::eval::{default_tolerances, evaluate_model};
use corrnet3d::train::{train_with, TrainConfig, TrainMode};

fn main() -> corrnet3d::Result<()> {
    let pairs = pair_dataset(PairKind::Rigid(RigidParams::default()), 8, 64, 7)?;
    let cfg = TrainConfig {
        mode: TrainMode::Supervised,
        epochs: 100,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let tols = default_tolerances();
    let outcome = train_with(&pairs, &cfg, |rec, model| {
        if rec.epoch % 20 == 0 {
            let r = evaluate_model(model, &pairs, &tols)?;
            println!("step {:4}  loss {:9.4}  training strict Corr {:.3}", rec.steps, rec.loss, r.strict);
        }
        Ok(())
    })?;
    let r = evaluate_model(&outcome.model, &pairs, &tols)?;
    println!("final training Corr {:.2}%", 100.0 * r.strict);
    Ok(())
}
