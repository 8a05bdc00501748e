#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use awh::posenet::HourglassConfig;
use awh::toyhands::{generate_dataset, ToyConfig};
use awh::trainer::{MetricsRecord, StepReport, TrainConfig};

pub fn tiny_toy() -> ToyConfig {
    ToyConfig {
        seed: 11,
        image_size: 32,
        depth_size: 8,
        source_train: 16,
        target_train: 8,
        target_test: 8,
        ..ToyConfig::default()
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        critic_lr: 1e-3,
        lambda_wd: 1.0,
        n_critic: 2,
        batch_size: 4,
        pretrain_epochs: 1,
        train_epochs: 1,
        eval_every: 1,
        model: HourglassConfig {
            stacks: 2,
            latent_channels: 8,
            latent_size: 8,
            image_size: 32,
            levels: 2,
            skip_connections: true,
            intermediate_tap: false,
        },
        ..TrainConfig::default()
    }
}

/// Writes the tiny dataset into `dir` and returns the directory.
pub fn tiny_dataset(dir: &Path) -> PathBuf {
    generate_dataset(&tiny_toy(), dir, 1).expect("tiny dataset generates");
    dir.to_path_buf()
}

pub fn step_reports(metrics: &Path) -> Vec<StepReport> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .filter_map(|l| match serde_json::from_str::<MetricsRecord>(l).unwrap() {
            MetricsRecord::Step(r) => Some(r),
            MetricsRecord::Eval { .. } => None,
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
