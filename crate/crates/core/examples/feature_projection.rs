//! Projects pooled encoder features of source and target renders of the same
//! poses onto two principal axes and reports how far apart the domains sit.
//!
//! cargo run --release --example feature_projection -- [checkpoint] [out.csv]

use awh::eval::{project_features, write_scatter_csv};
use awh::posenet::{HourglassConfig, PoseNet};
use awh::simweight::Domain;
use awh::toyhands::{Split, ToyConfig};
use candle_core::{DType, Device};

fn main() -> awh::Result<()> {
    let mut args = std::env::args().skip(1);
    let net = match args.next() {
        Some(ckpt) => PoseNet::load(ckpt.as_ref(), DType::F32, &Device::Cpu)?,
        None => PoseNet::new(HourglassConfig::desk(), 0, DType::F32, &Device::Cpu)?,
    };
    let cfg = ToyConfig {
        image_size: net.config().image_size,
        depth_size: net.config().image_size / 4,
        ..ToyConfig::desk()
    };
    let n = 64;
    let source: Vec<_> = (0..n)
        .map(|i| cfg.sample_as(Split::TargetTest, i, Domain::Source))
        .collect::<awh::Result<_>>()?;
    let target: Vec<_> = (0..n).map(|i| cfg.sample(Split::TargetTest, i)).collect::<awh::Result<_>>()?;
    let points = project_features(&net, &source, &target, 2 * n)?;

    let centroid = |d: Domain| {
        let sel: Vec<_> = points.iter().filter(|p| p.domain == d).collect();
        let k = sel.len() as f64;
        (sel.iter().map(|p| p.x).sum::<f64>() / k, sel.iter().map(|p| p.y).sum::<f64>() / k)
    };
    let (sx, sy) = centroid(Domain::Source);
    let (tx, ty) = centroid(Domain::Target);
    println!("source centroid ({sx:.4}, {sy:.4}), target centroid ({tx:.4}, {ty:.4})");
    println!("centroid gap {:.4}", ((sx - tx).powi(2) + (sy - ty).powi(2)).sqrt());
    if let Some(out) = args.next() {
        write_scatter_csv(&points, out.as_ref())?;
        println!("wrote {out}");
    }
    Ok(())
}
