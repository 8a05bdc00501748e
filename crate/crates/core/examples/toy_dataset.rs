//! Generates a small two-domain toy dataset and prints per-split statistics.
//!
//! cargo run --release --example toy_dataset -- [out_dir]

use awh::toyhands::{generate_dataset, read_manifest, Split, ToyConfig};

fn main() -> awh::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("awh-toy").display().to_string());
    let cfg = ToyConfig {
        seed: 7,
        source_train: 16,
        target_train: 8,
        target_test: 8,
        ..ToyConfig::default()
    };
    generate_dataset(&cfg, out.as_ref(), 2)?;
    for split in Split::ALL {
        let m = read_manifest(&std::path::Path::new(&out).join(split.manifest_file()))?;
        let samples = m.load_all()?;
        let mean_root_z =
            samples.iter().map(|s| s.kp3d.0[0][2]).sum::<f64>() / samples.len() as f64;
        let mean_pixel = samples
            .iter()
            .map(|s| s.image.iter().map(|&v| v as f64).sum::<f64>() / s.image.len() as f64)
            .sum::<f64>()
            / samples.len() as f64;
        println!(
            "{:<13} {:>3} samples  mean root depth {:6.1} mm  mean intensity {:5.1}",
            split.name(),
            samples.len(),
            mean_root_z,
            mean_pixel
        );
    }
    println!("wrote {out}");
    Ok(())
}
