//! Renders a normalized depth image from ground-truth 2D keypoints and depths
//! with an untrained generator and compares it with the rendered target.
//!
//! cargo run --release --example depth_regularizer

use awh::depthreg::{loss_depth, DepthGenerator};
use awh::geometry::{to_pose25d, NormalizationSpec};
use awh::toyhands::{Split, ToyConfig};
use candle_core::{DType, Device};

fn ascii(values: &[f32], size: usize) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let mut s = String::new();
    for r in 0..size {
        for c in 0..size {
            let v = values[r * size + c].clamp(0.0, 1.0);
            s.push(RAMP[(v * (RAMP.len() - 1) as f32).round() as usize] as char);
        }
        s.push('\n');
    }
    s
}

fn main() -> awh::Result<()> {
    let cfg = ToyConfig::desk();
    let sample = cfg.sample(Split::SourceTrain, 3)?;
    let pose = to_pose25d(&sample.kp3d, &sample.intrinsics, &NormalizationSpec::default())?;
    let gen = DepthGenerator::new(cfg.image_size, cfg.depth_size, 0, DType::F32, &Device::Cpu)?;
    let rendered = gen.render_depth(&sample.kp2d, &pose.z_n)?;
    println!("target depth image:\n{}", ascii(&sample.depth.values, sample.depth.size));
    println!("untrained generator:\n{}", ascii(&rendered.values, rendered.size));
    println!("L1 depth loss {:.4}", loss_depth(&rendered, &sample.depth)?);
    Ok(())
}
