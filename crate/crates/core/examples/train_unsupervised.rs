//! Unsupervised training at the desk-scale protocol, with a checkpoint and
//! loss log written to a directory.
//!
//! ```text
//! cargo run --release --example train_unsupervised -- [pairs] [epochs] [out-dir]
//! ```
//!
//! Defaults are 200 pairs, 50 epochs and `target/train_unsupervised`; the full
//! run takes a few minutes on one core.

use std::path::PathBuf;

use corrnet3d::cloud::synth::{pair_dataset, PairKind, RigidParams};
use corrnet3d::eval::{default_tolerances, evaluate_model};
use corrnet3d::train::{loss_log_csv, train_with, TrainConfig};

fn main() -> corrnet3d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let out = args.get(2).map_or_else(|| PathBuf::from("target/train_unsupervised"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| corrnet3d::Error::io(&out, e))?;

    let kind = PairKind::Rigid(RigidParams::default());
    let train_pairs = pair_dataset(kind, pairs, 128, 1)?;
    let held_out = pair_dataset(kind, 20, 128, 2)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    print!("{cfg}");

    let tols = default_tolerances();
    let outcome = train_with(&train_pairs, &cfg, |rec, model| {
        if rec.epoch % 10 == 0 || rec.epoch == 1 {
            let r = evaluate_model(model, &held_out, &tols)?;
            println!(
                "epoch {:3}  loss {:10.3}  held-out strict {:.3}  @20% {:.3}",
                rec.epoch,
                rec.loss,
                r.strict,
                r.at(0.2)
            );
        }
        Ok(())
    })?;

    let ckpt = out.join("model.ckpt");
    outcome.model.params.save_checkpoint(&ckpt)?;
    let log = out.join("loss.csv");
    std::fs::write(&log, loss_log_csv(&outcome.log)).map_err(|e| corrnet3d::Error::io(&log, e))?;
    println!("wrote {} and {}", ckpt.display(), log.display());
    Ok(())
}
