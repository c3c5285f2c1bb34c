//! Saving a model, reloading it with its architecture inferred from the
//! stored shapes, and what happens on a mismatch.

use corrnet3d::indicator::{DeSmoothConfig, Normalizer};
use corrnet3d::model::{ArchConfig, CorrNet3D};

fn main() -> corrnet3d::Result<()> {
    let dir = std::env::temp_dir().join("corrnet3d-checkpoints-example");
    std::fs::create_dir_all(&dir).map_err(|e| corrnet3d::Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");

    let model = CorrNet3D::with_defaults(42)?;
    model.params.save_checkpoint(&path)?;
    println!("{} parameters, {} scalars -> {}", model.params.len(), model.params.num_scalars(), path.display());

    let normalizer = Normalizer::DeSmooth(DeSmoothConfig::default());
    let back = CorrNet3D::load(&path, ArchConfig::default(), normalizer)?;
    println!("reloaded widths {:?}, identical values: {}", back.arch.widths, back.params.same_values(&model.params));

    // Loading into a fixed, different architecture names the offending parameter.
    let narrow = CorrNet3D::new(
        ArchConfig {
            widths: vec![64, 64, 64],
            ..ArchConfig::default()
        },
        normalizer,
        0,
        0,
    )?;
    let mut params = narrow.params.clone();
    match params.load_checkpoint(&path) {
        Ok(()) => println!("unexpectedly loaded"),
        Err(e) => println!("expected failure: {e}"),
    }
    Ok(())
}
