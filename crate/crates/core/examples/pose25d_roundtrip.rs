//! Converts a sampled hand pose to the 2.5D representation (pixels plus
//! normalized root-relative depth) and lifts it back with the true root depth
//! and bone length.
//!
//! cargo run --release --example pose25d_roundtrip

use awh::geometry::{lift_to_3d, to_pose25d, NormalizationSpec};
use awh::toyhands::{Split, ToyConfig};

fn main() -> awh::Result<()> {
    let cfg = ToyConfig::default();
    let cam = cfg.intrinsics();
    let spec = NormalizationSpec::default();
    let pose = cfg.pose_for(&mut cfg.sample_rng(Split::SourceTrain, 0));
    let p25 = to_pose25d(&pose, &cam, &spec)?;

    println!("joint      u (px)    v (px)    z_n");
    for (k, (uv, z)) in p25.uv.iter().zip(&p25.z_n).enumerate() {
        println!("{k:>5} {:>9.2} {:>9.2} {:>8.4}", uv[0], uv[1], z);
    }

    let root_z = pose.0[spec.root_index][2];
    let lifted = lift_to_3d(&p25, &cam, root_z, spec.bone_length(&pose), &spec)?;
    let worst = pose
        .0
        .iter()
        .zip(lifted.keypoints.0.iter())
        .map(|(a, b)| {
            let d: f64 = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            d / a.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    println!("root depth {root_z:.1} mm, worst relative round-trip error {worst:.2e}");
    Ok(())
}
