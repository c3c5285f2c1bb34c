//! Reading and writing point clouds as XYZ, ASCII PLY and OFF.

use corrnet3d::cloud::io::{parse, write_off, write_ply_ascii, write_xyz, Format};
use corrnet3d::cloud::synth::ShapeTemplate;

fn main() -> corrnet3d::Result<()> {
    let cloud = ShapeTemplate::random(5).sample(6, 1)?;

    for (name, text, format) in [
        ("xyz", write_xyz(&cloud), Format::Xyz),
        ("ply", write_ply_ascii(&cloud), Format::Ply),
        ("off", write_off(&cloud), Format::Off),
    ] {
        let back = parse(text.as_bytes(), format)?;
        let err = cloud
            .points()
            .iter()
            .zip(back.points())
            .map(|(a, b)| corrnet3d::cloud::dist(*a, *b))
            .fold(0.0, f64::max);
        println!("--- {name}: {} points, max round-trip error {err:.1e}", back.len());
        for line in text.lines().take(4) {
            println!("    {line}");
        }
    }

    // Faces in an OFF file are accepted and ignored.
    let off = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
    println!("mesh vertices: {:?}", parse(off.as_bytes(), Format::Off)?.points());
    Ok(())
}
