//! Channel similarity weights between two feature batches: identical channels
//! get weight 1, channels with disjoint support get 0, and rescaling a channel
//! leaves its weight unchanged.
//!
//! cargo run --release --example similarity_weights

use awh::simweight::{apply_weights, channel_similarity, Domain, FeatureMap};
use candle_core::{Device, Tensor};

fn main() -> awh::Result<()> {
    let dev = Device::Cpu;
    // 3 channels of 2x2 maps, batch of 1
    let zs = Tensor::new(
        &[[[[1.0f64, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 0.0]], [[1.0, 2.0], [3.0, 4.0]]]],
        &dev,
    )?;
    let zt = Tensor::new(
        &[[[[1.0f64, 1.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 5.0]], [[2.0, 4.0], [6.0, 8.0]]]],
        &dev,
    )?;
    let zs = FeatureMap::new(zs, Domain::Source)?;
    let zt = FeatureMap::new(zt, Domain::Target)?;
    let alpha = channel_similarity(&zs, &zt)?;
    for (i, a) in alpha.values()?.iter().enumerate() {
        println!("channel {i}: alpha = {a:.6}");
    }
    let weighted = apply_weights(&zt, &alpha)?;
    println!("weighted target features: {:?}", weighted.values().flatten_all()?.to_vec1::<f64>()?);
    println!("summary: {:?}", alpha.summary()?);
    Ok(())
}
