//! Training: source-only pretraining, half-half batches with the target set
//! replicated to the source size, alternating critic and regressor updates, and
//! the overall loss with every ablation switch.

mod data;
mod run;

pub use data::{LabeledSet, SourceBatch, TargetBatch, WeakSet};
pub use run::{checkpoint_config, run, MetricsRecord, RunPaths, RunSummary, Trainer, CHECKPOINT_FILE, METRICS_FILE};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, io_err, AwhError, Result};
use crate::geometry::NormalizationSpec;
use crate::posenet::HourglassConfig;
use crate::simweight::AlphaSummary;

/// Losses that can be attached to the first hourglass stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FssLoss {
    /// Source 2D term.
    R2D,
    /// Source normalized-depth term.
    R3D,
    /// Target 2D term.
    S2D,
}

impl std::str::FromStr for FssLoss {
    type Err = AwhError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R2D" => Ok(FssLoss::R2D),
            "R3D" => Ok(FssLoss::R3D),
            "S2D" => Ok(FssLoss::S2D),
            _ => Err(invalid_input(format!("unknown intermediate loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_wd: f64,
    pub lambda_res: f64,
    pub lambda_reg: f64,
    pub lambda_gp: f64,
    pub lambda_alpha: f64,
    pub lr: f64,
    pub critic_lr: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub seed: u64,
    pub use_awh: bool,
    pub use_plain_wd: bool,
    pub fss_tap: bool,
    pub fss_losses: Vec<FssLoss>,
    pub constant_c: f64,
    /// Let gradients flow through the similarity weights.
    pub alpha_backprop: bool,
    /// Clamp negative similarity weights to zero.
    pub alpha_clamp: bool,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub model: HourglassConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_wd: 1e-2,
            lambda_res: 1.0,
            lambda_reg: 0.1,
            lambda_gp: 10.0,
            lambda_alpha: 1.0,
            lr: 1e-4,
            critic_lr: 1e-4,
            n_critic: 5,
            batch_size: 32,
            pretrain_epochs: 5,
            train_epochs: 20,
            seed: 0,
            use_awh: true,
            use_plain_wd: false,
            fss_tap: false,
            fss_losses: Vec::new(),
            constant_c: 1.0,
            alpha_backprop: false,
            alpha_clamp: false,
            eval_every: 1,
            model: HourglassConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Single-core profile for the 64 px desk dataset. The depth weight is raised
    /// so the depth term is comparable to the pixel-unit 2D term.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            critic_lr: 1e-3,
            lambda_wd: 1.0,
            lambda_alpha: 20.0,
            pretrain_epochs: 20,
            train_epochs: 4,
            eval_every: 0,
            model: HourglassConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn adversarial(&self) -> bool {
        (self.use_awh || self.use_plain_wd) && self.lambda_wd > 0.0
    }

    /// Architecture actually built: the tap follows `fss_tap`.
    pub fn model_config(&self) -> HourglassConfig {
        HourglassConfig {
            intermediate_tap: self.fss_tap,
            ..self.model
        }
    }

    pub fn normalization(&self) -> NormalizationSpec {
        NormalizationSpec {
            constant_c: self.constant_c,
            ..NormalizationSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_wd", self.lambda_wd),
            ("lambda_res", self.lambda_res),
            ("lambda_reg", self.lambda_reg),
            ("lambda_gp", self.lambda_gp),
            ("lambda_alpha", self.lambda_alpha),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("lr", self.lr), ("critic_lr", self.critic_lr), ("constant_c", self.constant_c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid_config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(invalid_config(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.use_awh && self.use_plain_wd {
            return Err(invalid_config("use_awh and use_plain_wd are mutually exclusive"));
        }
        if !self.fss_tap && !self.fss_losses.is_empty() {
            return Err(invalid_config("fss_losses requires fss_tap"));
        }
        if self.adversarial() && self.n_critic == 0 {
            return Err(invalid_config("n_critic must be >= 1 when the adversarial term is on"));
        }
        self.model_config().validate()
    }
}

/// The terms of the overall loss. `wd` is the adversarial term as it enters the
/// overall loss (the negated distance estimate, so that `-lambda_wd * wd` pulls
/// the domains together).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub wd: f64,
    pub res_source_25d: f64,
    pub res_target_2d: f64,
    pub reg_source: f64,
    pub reg_target: f64,
    pub fss: f64,
}

impl LossComponents {
    /// Name of the first non-finite component.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("wd", self.wd),
            ("res_source_25d", self.res_source_25d),
            ("res_target_2d", self.res_target_2d),
            ("reg_source", self.reg_source),
            ("reg_target", self.reg_target),
            ("fss", self.fss),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `-lambda_wd * wd + lambda_res * (res_s + res_t) + lambda_reg * (reg_s + reg_t)`,
/// plus `lambda_res * fss` when the intermediate tap is on.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig) -> f64 {
    let mut total = -cfg.lambda_wd * c.wd
        + cfg.lambda_res * (c.res_source_25d + c.res_target_2d)
        + cfg.lambda_reg * (c.reg_source + c.reg_target);
    if cfg.fss_tap {
        total += cfg.lambda_res * c.fss;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    /// Adversarial term as entered in the overall loss.
    pub wd: f64,
    /// Critic's distance estimate `mean_s f - mean_t f` (equals `-wd`).
    pub wd_estimate: f64,
    pub gp: f64,
    pub res_source_25d: f64,
    pub res_target_2d: f64,
    pub reg_source: f64,
    pub reg_target: f64,
    pub fss: f64,
    pub total: f64,
    pub alpha: Option<AlphaSummary>,
}

impl StepReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            wd: self.wd,
            res_source_25d: self.res_source_25d,
            res_target_2d: self.res_target_2d,
            reg_source: self.reg_source,
            reg_target: self.reg_target,
            fss: self.fss,
        }
    }
}

/// Target indices cycled in order until `source_count` entries are drawn, so every
/// target sample appears `floor(s/t)` or `ceil(s/t)` times.
pub fn balance_target(source_count: usize, target_count: usize) -> Result<Vec<usize>> {
    if target_count == 0 {
        return Err(invalid_input("target set is empty"));
    }
    Ok((0..source_count).map(|i| i % target_count).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_counts() {
        let idx = balance_target(8000, 1000).unwrap();
        let mut counts = vec![0; 1000];
        idx.iter().for_each(|&i| counts[i] += 1);
        assert!(counts.iter().all(|&c| c == 8));
        assert_eq!(balance_target(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        let idx = balance_target(5, 2).unwrap();
        assert_eq!(idx.iter().filter(|&&i| i == 0).count(), 3);
        assert_eq!(idx.iter().filter(|&&i| i == 1).count(), 2);
        assert!(balance_target(5, 0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = TrainConfig {
            lambda_wd: 1.0,
            lambda_res: 1.0,
            lambda_reg: 1.0,
            ..TrainConfig::default()
        };
        let c = LossComponents {
            wd: 1.0,
            res_source_25d: 2.0,
            res_target_2d: 3.0,
            reg_source: 4.0,
            reg_target: 5.0,
            fss: 0.0,
        };
        assert_eq!(total_loss(&c, &cfg), 13.0);
        let zero = TrainConfig {
            lambda_wd: 0.0,
            lambda_res: 0.0,
            lambda_reg: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(&c, &zero), 0.0);
        let tap = TrainConfig {
            fss_tap: true,
            ..cfg.clone()
        };
        assert_eq!(total_loss(&LossComponents { fss: 2.0, ..c }, &tap), 15.0);
        assert_eq!(total_loss(&LossComponents { fss: 2.0, ..c }, &cfg), 13.0);
        assert_eq!(LossComponents { reg_target: f64::NAN, ..c }.non_finite(), Some("reg_target"));
    }

    #[test]
    fn config_validation_and_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let bad = [
            TrainConfig { batch_size: 7, ..cfg.clone() },
            TrainConfig { use_plain_wd: true, ..cfg.clone() },
            TrainConfig { fss_losses: vec![FssLoss::R2D], ..cfg.clone() },
            TrainConfig { lambda_gp: -1.0, ..cfg.clone() },
            TrainConfig {
                fss_tap: true,
                model: HourglassConfig { stacks: 1, ..cfg.model },
                ..cfg.clone()
            },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
        let partial = TrainConfig::from_toml_str("seed = 4\nfss_tap = true\nfss_losses = [\"R2D\", \"S2D\"]\n[model]\nlatent_channels = 32\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.model.latent_channels, 32);
        assert_eq!(partial.model.stacks, 2);
        assert!(partial.model_config().intermediate_tap);
        assert!(TrainConfig::from_toml_str("no_such_field = 1").is_err());
    }
}
