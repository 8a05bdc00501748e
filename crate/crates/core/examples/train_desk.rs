//! Generates a desk-sized dataset, pretrains on the source domain, adapts with
//! similarity-weighted Wasserstein alignment and reports target-test accuracy.
//!
//! cargo run --release --example train_desk -- [out_dir] [pretrain_epochs] [train_epochs]

use awh::toyhands::{generate_dataset, ToyConfig};
use awh::trainer::{run, MetricsRecord, RunPaths, TrainConfig};

fn main() -> awh::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("awh-desk"), Into::into);
    let mut cfg = TrainConfig::desk();
    if let Some(p) = args.next() {
        cfg.pretrain_epochs = p.parse().expect("pretrain epochs must be an integer");
    }
    if let Some(t) = args.next() {
        cfg.train_epochs = t.parse().expect("train epochs must be an integer");
    }
    let data = out.join("data");
    if !data.join("target_test.jsonl").is_file() {
        generate_dataset(&ToyConfig::desk(), &data, 1)?;
    }
    let summary = run(&cfg, &RunPaths::from_dataset(&data, &out.join("run")))?;

    let text = std::fs::read_to_string(&summary.metrics).expect("metrics written");
    for line in text.lines() {
        if let Ok(MetricsRecord::Eval { epoch, report }) = serde_json::from_str(line) {
            println!("epoch {epoch:>3}: target-test EPE {:6.2} mm  AUC {:.3}", report.mean_epe_mm, report.auc);
        }
    }
    println!("{} steps, checkpoint {}", summary.steps, summary.checkpoint.display());
    Ok(())
}
