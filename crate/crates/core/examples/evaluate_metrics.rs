//! Scores noisy 2.5D predictions against ground truth: mean EPE, per-joint EPE,
//! the PCK curve over 20-50 mm and its AUC.
//!
//! cargo run --release --example evaluate_metrics -- [noise_px]

use awh::eval::{evaluate_poses, PCK_0_30, PCK_20_50};
use awh::geometry::{to_pose25d, NormalizationSpec};
use awh::toyhands::{Split, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> awh::Result<()> {
    let noise: f64 = std::env::args().nth(1).map_or(2.0, |s| s.parse().expect("noise must be a number"));
    let cfg = ToyConfig::desk();
    let spec = NormalizationSpec::default();
    let samples: Vec<_> = (0..64).map(|i| cfg.sample(Split::TargetTest, i)).collect::<awh::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<_> = samples
        .iter()
        .map(|s| {
            let mut p = to_pose25d(&s.kp3d, &s.intrinsics, &spec)?;
            for (uv, z) in p.uv.iter_mut().zip(p.z_n.iter_mut()) {
                uv[0] += rng.random_range(-noise..noise);
                uv[1] += rng.random_range(-noise..noise);
                *z += rng.random_range(-0.1..0.1);
            }
            Ok(p)
        })
        .collect::<awh::Result<_>>()?;

    let report = evaluate_poses(&preds, &samples, &spec, PCK_20_50)?;
    println!("mean EPE {:.2} mm over {} samples", report.mean_epe_mm, report.samples);
    println!("AUC 20-50 {:.4}, AUC 0-30 {:.4}", report.auc, report.auc_0_30);
    print!("{}", report.pck_csv());
    let fine = evaluate_poses(&preds, &samples, &spec, PCK_0_30)?;
    println!("PCK at 10 mm: {:.3}", fine.pck.iter().find(|(t, _)| (*t - 10.0).abs() < 1e-9).map_or(0.0, |p| p.1));
    Ok(())
}
