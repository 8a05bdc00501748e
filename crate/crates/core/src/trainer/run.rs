use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{LabeledSet, SourceBatch, TargetBatch, WeakSet};
use super::{balance_target, total_loss, FssLoss, LossComponents, Phase, StepReport, TrainConfig};
use crate::critic::{critic_objective_vectors, pool, wd_loss_vectors, Critic, MlpCritic};
use crate::depthreg::{loss_depth_tensor, DepthGenerator};
use crate::error::{invalid_config, invalid_input, io_err, AwhError, Result};
use crate::eval::{evaluate, EvalReport, PCK_20_50};
use crate::nn::{load_archive, save_archive, scalar, Adam, ParamStore};
use crate::posenet::{
    loss_25d_tensor, loss_2d_tensor, loss_depth_term_tensor, HourglassConfig, PoseNet, POSENET_PREFIX,
};
use crate::simweight::{apply_weights, channel_similarity, AlphaSummary, ChannelWeights, Domain, FeatureMap};
use crate::toyhands::{read_manifest, Sample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

const DEPTH_PREFIX: &str = "depth.";
const CRITIC_PREFIX: &str = "critic.";
const MAIN_OPT_PREFIX: &str = "adam.main.";
const CRITIC_OPT_PREFIX: &str = "adam.critic.";

/// Independent seed for one purpose (`stream`) derived from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 4));
    rng.set_stream(epoch as u64);
    rng
}

/// Random stream for the critic inside one step.
pub fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 5));
    rng.set_stream(((epoch as u64) << 32) | step as u64);
    rng
}

/// Model, depth generator, critic and both optimizers, plus the position in the
/// epoch schedule.
pub struct Trainer {
    cfg: TrainConfig,
    net: PoseNet,
    depth_gen: DepthGenerator,
    critic: MlpCritic,
    main_params: ParamStore,
    opt: Adam,
    critic_opt: Adam,
    next_epoch: usize,
    dtype: DType,
    device: Device,
}

struct Forward {
    components: LossComponents,
    loss: Tensor,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, image_size: usize, depth_size: usize) -> Result<Self> {
        cfg.validate()?;
        if image_size != cfg.model.image_size {
            return Err(invalid_config(format!(
                "dataset images are {image_size} px but the model expects {} px",
                cfg.model.image_size
            )));
        }
        let dtype = DType::F32;
        let device = Device::Cpu;
        let net = PoseNet::new(cfg.model_config(), sub_seed(cfg.seed, 1), dtype, &device)?;
        let depth_gen = DepthGenerator::new(image_size, depth_size, sub_seed(cfg.seed, 2), dtype, &device)?;
        let critic = MlpCritic::new(cfg.model.latent_channels, sub_seed(cfg.seed, 3), dtype, &device)?;
        let main_params = ParamStore::merged(&[(POSENET_PREFIX, net.params()), (DEPTH_PREFIX, depth_gen.params())])?;
        let opt = Adam::new(&main_params, cfg.lr, 0.9, 0.999)?;
        let critic_opt = Adam::new(critic.params(), cfg.critic_lr, 0.5, 0.9)?;
        Ok(Self {
            cfg,
            net,
            depth_gen,
            critic,
            main_params,
            opt,
            critic_opt,
            next_epoch: 0,
            dtype,
            device,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &PoseNet {
        &self.net
    }

    pub fn depth_generator(&self) -> &DepthGenerator {
        &self.depth_gen
    }

    pub fn critic(&self) -> &MlpCritic {
        &self.critic
    }

    /// Index of the next epoch to run; pretraining epochs come first.
    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.pretrain_epochs + self.cfg.train_epochs
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.total_epochs()
    }

    /// Every trainable value of the regressor and depth generator, flattened.
    pub fn model_values(&self) -> Result<Vec<f64>> {
        self.main_params.flat_values()
    }

    /// Supervised terms shared by pretraining and adaptation. `target` is absent
    /// during pretraining.
    fn supervised(&self, src: &SourceBatch, tgt: Option<&TargetBatch>) -> Result<(Forward, Option<(FeatureMap, FeatureMap)>)> {
        let cfg = &self.cfg;
        let ns = src.len();
        let images = match tgt {
            Some(t) => Tensor::cat(&[&src.images, &t.images], 0)?,
            None => src.images.clone(),
        };
        let z = self.net.encode(&images, Domain::Source)?;
        let reg = self.net.regress(&z)?;
        let pose_s = reg.pose.narrow(0, ns)?;
        let res_s = loss_25d_tensor(&pose_s, &src.gt, cfg.lambda_alpha)?;

        let uv_gt = match tgt {
            Some(t) => Tensor::cat(&[&src.gt.uv, &t.kp2d], 0)?,
            None => src.gt.uv.clone(),
        };
        let rendered = self.depth_gen.render(&uv_gt, &reg.pose.z_n)?;
        let reg_s = loss_depth_tensor(&rendered.narrow(0, 0, ns)?, &src.depth)?;

        let mut loss = ((&res_s * cfg.lambda_res)? + (&reg_s * cfg.lambda_reg)?)?;
        let mut c = LossComponents {
            res_source_25d: scalar(&res_s)?,
            reg_source: scalar(&reg_s)?,
            ..LossComponents::default()
        };
        let mut feats = None;
        if let Some(t) = tgt {
            let nt = t.len();
            let pose_t = reg.pose.narrow(ns, nt)?;
            let res_t = loss_2d_tensor(&pose_t.uv, &t.kp2d)?;
            let reg_t = loss_depth_tensor(&rendered.narrow(0, ns, nt)?, &t.depth)?;
            loss = ((loss + (&res_t * cfg.lambda_res)?)? + (&reg_t * cfg.lambda_reg)?)?;
            c.res_target_2d = scalar(&res_t)?;
            c.reg_target = scalar(&reg_t)?;

            if let Some(mid) = &reg.intermediate {
                let mut fss: Option<Tensor> = None;
                for l in dedup(&cfg.fss_losses) {
                    let term = match l {
                        FssLoss::R2D => loss_2d_tensor(&mid.uv.narrow(0, 0, ns)?, &src.gt.uv)?,
                        FssLoss::R3D => {
                            (loss_depth_term_tensor(&mid.z_n.narrow(0, 0, ns)?, &src.gt.z_n)? * cfg.lambda_alpha)?
                        }
                        FssLoss::S2D => loss_2d_tensor(&mid.uv.narrow(0, ns, nt)?, &t.kp2d)?,
                    };
                    fss = Some(match fss {
                        Some(f) => (f + term)?,
                        None => term,
                    });
                }
                if let Some(f) = fss {
                    c.fss = scalar(&f)?;
                    loss = (loss + (f * cfg.lambda_res)?)?;
                }
            }
            let zv = z.values();
            feats = Some((
                FeatureMap::new(zv.narrow(0, 0, ns)?, Domain::Source)?,
                FeatureMap::new(zv.narrow(0, ns, nt)?, Domain::Target)?,
            ));
        }
        Ok((Forward { components: c, loss }, feats))
    }

    fn finish(&mut self, phase: Phase, epoch: usize, step: usize, fwd: Forward, extra: (f64, Option<AlphaSummary>)) -> Result<StepReport> {
        let c = fwd.components;
        if let Some(component) = c.non_finite() {
            return Err(AwhError::NonFinite { component, epoch, step });
        }
        let grads = fwd.loss.backward()?;
        self.opt.step(&self.main_params, &grads)?;
        Ok(StepReport {
            phase,
            epoch,
            step,
            wd: c.wd,
            wd_estimate: -c.wd,
            gp: extra.0,
            res_source_25d: c.res_source_25d,
            res_target_2d: c.res_target_2d,
            reg_source: c.reg_source,
            reg_target: c.reg_target,
            fss: c.fss,
            total: total_loss(&c, &self.cfg),
            alpha: extra.1,
        })
    }

    /// One source-only update of the regressor and depth generator.
    pub fn pretrain_step(&mut self, batch: &SourceBatch, epoch: usize, step: usize) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(invalid_input("empty source batch"));
        }
        let (fwd, _) = self.supervised(batch, None)?;
        self.finish(Phase::Pretrain, epoch, step, fwd, (0.0, None))
    }

    /// `n_critic` critic updates on the current (weighted, pooled, detached)
    /// features, then one update of the regressor and depth generator.
    pub fn train_step(
        &mut self,
        batch_s: &SourceBatch,
        batch_t: &TargetBatch,
        rng: &mut ChaCha8Rng,
        epoch: usize,
        step: usize,
    ) -> Result<StepReport> {
        if batch_t.kp3d.is_some() {
            return Err(AwhError::TargetLabelsPresent);
        }
        let half = self.cfg.batch_size / 2;
        if batch_s.len() != half || batch_t.len() != half {
            return Err(invalid_input(format!(
                "expected {half} source and {half} target samples, got {} and {}",
                batch_s.len(),
                batch_t.len()
            )));
        }
        let (mut fwd, feats) = self.supervised(batch_s, Some(batch_t))?;
        let (zs, zt) = feats.expect("target batch given");
        let mut gp = 0.0;
        let mut alpha_summary = None;
        if self.cfg.adversarial() {
            let cfg = &self.cfg;
            let alpha = if cfg.use_awh {
                let a = channel_similarity(&zs, &zt)?;
                let a = if cfg.alpha_backprop { a } else { a.detach() };
                if cfg.alpha_clamp {
                    a.clamp_negative()?
                } else {
                    a
                }
            } else {
                ChannelWeights::ones(zs.channels(), self.dtype, &self.device)?
            };
            alpha_summary = Some(alpha.summary()?);
            let ps = pool(&apply_weights(&zs, &alpha)?)?;
            let pt = pool(&apply_weights(&zt, &alpha)?)?;
            let (ps_d, pt_d) = (ps.detach(), pt.detach());
            for _ in 0..cfg.n_critic {
                let obj = critic_objective_vectors(&self.critic, &ps_d, &pt_d, cfg.lambda_gp, rng)?;
                gp = scalar(&obj.gp)?;
                let grads = obj.combined.backward()?;
                self.critic_opt.step(self.critic.params(), &grads)?;
            }
            let wd = wd_loss_vectors(&self.critic, &ps, &pt)?;
            fwd.components.wd = -scalar(&wd)?;
            fwd.loss = (fwd.loss + (wd * self.cfg.lambda_wd)?)?;
        }
        self.finish(Phase::Train, epoch, step, fwd, (gp, alpha_summary))
    }

    /// Runs the next epoch, calling `sink` after every step.
    pub fn run_epoch(
        &mut self,
        source: &LabeledSet,
        target: &WeakSet,
        sink: &mut dyn FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        if self.is_done() {
            return Err(invalid_input("all configured epochs have run"));
        }
        let e = self.next_epoch;
        let b = self.cfg.batch_size;
        let mut order = epoch_rng(self.cfg.seed, e);
        let mut perm: Vec<usize> = (0..source.len()).collect();
        perm.shuffle(&mut order);
        if e < self.cfg.pretrain_epochs {
            if source.len() < b {
                return Err(invalid_input("source set is smaller than one batch"));
            }
            for (step, idx) in perm.chunks_exact(b).enumerate() {
                let batch = source.batch(idx, self.dtype, &self.device)?;
                let report = self.pretrain_step(&batch, e, step)?;
                sink(&report)?;
            }
        } else {
            let half = b / 2;
            if source.len() < half {
                return Err(invalid_input("source set is smaller than half a batch"));
            }
            let mut tperm = balance_target(source.len(), target.len())?;
            tperm.shuffle(&mut order);
            for (step, (si, ti)) in perm.chunks_exact(half).zip(tperm.chunks_exact(half)).enumerate() {
                let bs = source.batch(si, self.dtype, &self.device)?;
                let bt = target.batch(ti, self.dtype, &self.device)?;
                let mut rng = step_rng(self.cfg.seed, e, step);
                let report = self.train_step(&bs, &bt, &mut rng, e, step)?;
                sink(&report)?;
            }
        }
        self.next_epoch += 1;
        Ok(())
    }

    /// Runs every remaining pretraining epoch.
    pub fn pretrain(&mut self, source: &LabeledSet, sink: &mut dyn FnMut(&StepReport) -> Result<()>) -> Result<()> {
        let empty = WeakSet::empty(source.image_size, source.depth_size);
        while self.next_epoch < self.cfg.pretrain_epochs {
            self.run_epoch(source, &empty, sink)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, test: &[Sample]) -> Result<EvalReport> {
        evaluate(&self.net, test, &self.cfg.normalization(), PCK_20_50)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.net.named_tensors(POSENET_PREFIX);
        tensors.extend(self.depth_gen.params().named_tensors(DEPTH_PREFIX));
        tensors.extend(self.critic.params().named_tensors(CRITIC_PREFIX));
        tensors.extend(self.opt.named_state(&self.main_params, MAIN_OPT_PREFIX));
        tensors.extend(self.critic_opt.named_state(self.critic.params(), CRITIC_OPT_PREFIX));
        let mut meta = HashMap::new();
        let (k, v) = self.net.metadata();
        meta.insert(k, v);
        meta.insert("config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        meta.insert("next_epoch".into(), self.next_epoch.to_string());
        meta.insert("main_steps".into(), self.opt.steps_taken().to_string());
        meta.insert("critic_steps".into(), self.critic_opt.steps_taken().to_string());
        meta.insert("depth_size".into(), self.depth_gen.depth_size().to_string());
        save_archive(path, &tensors, meta)
    }

    /// Restores a trainer from a checkpoint. `cfg` replaces the stored
    /// configuration (for example to extend the epoch budget or to branch several
    /// adaptation settings off one pretrained checkpoint); the architecture and
    /// seed must match.
    pub fn resume(path: &Path, cfg: Option<TrainConfig>) -> Result<Self> {
        let archive = load_archive(path, &Device::Cpu)?;
        let ckpt_err = |message: String| AwhError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let meta = |key: &str| {
            archive
                .metadata
                .get(key)
                .ok_or_else(|| ckpt_err(format!("missing metadata `{key}`")))
        };
        let stored: TrainConfig =
            serde_json::from_str(meta("config")?).map_err(|e| ckpt_err(format!("bad config: {e}")))?;
        let num = |key: &str| -> Result<u64> {
            meta(key)?.parse().map_err(|_| ckpt_err(format!("bad `{key}`")))
        };
        let cfg = cfg.unwrap_or_else(|| stored.clone());
        // the intermediate tap adds no parameters, so a pretrained network can be
        // resumed with or without it
        let weights = |c: &TrainConfig| HourglassConfig {
            intermediate_tap: false,
            ..c.model_config()
        };
        if weights(&cfg) != weights(&stored) || cfg.seed != stored.seed {
            return Err(invalid_config("resume config must keep the stored architecture and seed"));
        }
        let depth_size = num("depth_size")? as usize;
        let mut t = Self::new(cfg, stored.model.image_size, depth_size)?;
        t.net.params().load_from(&archive.tensors, POSENET_PREFIX)?;
        t.depth_gen.params().load_from(&archive.tensors, DEPTH_PREFIX)?;
        t.critic.params().load_from(&archive.tensors, CRITIC_PREFIX)?;
        t.opt.load_state(&t.main_params, &archive.tensors, MAIN_OPT_PREFIX, num("main_steps")?)?;
        t.critic_opt
            .load_state(t.critic.params(), &archive.tensors, CRITIC_OPT_PREFIX, num("critic_steps")?)?;
        t.next_epoch = num("next_epoch")? as usize;
        Ok(t)
    }
}

/// Training configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let archive = load_archive(path, &Device::Cpu)?;
    let text = archive.metadata.get("config").ok_or_else(|| AwhError::Checkpoint {
        path: path.to_path_buf(),
        message: "missing metadata `config`".into(),
    })?;
    serde_json::from_str(text).map_err(|e| AwhError::Checkpoint {
        path: path.to_path_buf(),
        message: format!("bad config: {e}"),
    })
}

fn dedup(losses: &[FssLoss]) -> Vec<FssLoss> {
    let mut out: Vec<FssLoss> = Vec::with_capacity(losses.len());
    for l in losses {
        if !out.contains(l) {
            out.push(*l);
        }
    }
    out
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step(StepReport),
    Eval { epoch: usize, report: EvalReport },
}

/// Inputs and outputs of [`run`]. `test` enables periodic evaluation.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl RunPaths {
    /// The three manifests of a generated dataset directory.
    pub fn from_dataset(dataset: &Path, out_dir: &Path) -> Self {
        use crate::toyhands::Split;
        let test = dataset.join(Split::TargetTest.manifest_file());
        Self {
            source: dataset.join(Split::SourceTrain.manifest_file()),
            target: dataset.join(Split::TargetTrain.manifest_file()),
            test: test.is_file().then_some(test),
            out_dir: out_dir.to_path_buf(),
            resume: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last_eval: Option<EvalReport>,
    pub steps: usize,
}

/// Pretraining, then adaptation epochs, with a checkpoint after every epoch and a
/// metrics line per step and per evaluation.
pub fn run(cfg: &TrainConfig, paths: &RunPaths) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.normalization();
    let source = LabeledSet::load(&paths.source, &spec)?;
    let target = WeakSet::load(&paths.target)?;
    if (source.image_size, source.depth_size) != (target.image_size, target.depth_size) {
        return Err(invalid_input("source and target datasets differ in image or depth size"));
    }
    let test = match &paths.test {
        Some(p) => read_manifest(p)?.load_all()?,
        None => Vec::new(),
    };
    fs::create_dir_all(&paths.out_dir).map_err(io_err(&paths.out_dir))?;
    let mut trainer = match &paths.resume {
        Some(ckpt) => Trainer::resume(ckpt, Some(cfg.clone()))?,
        None => Trainer::new(cfg.clone(), source.image_size, source.depth_size)?,
    };
    let config_path = paths.out_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let metrics_path = paths.out_dir.join(METRICS_FILE);
    let file = if paths.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(io_err(&metrics_path))?;
    let mut log = BufWriter::new(file);
    let ckpt_path = paths.out_dir.join(CHECKPOINT_FILE);
    let mut last_eval = None;
    let mut steps = 0;
    while !trainer.is_done() {
        let e = trainer.next_epoch();
        let mut sink = |r: &StepReport| -> Result<()> {
            steps += 1;
            log::debug!("epoch {} step {} total {:.4}", r.epoch, r.step, r.total);
            write_record(&mut log, &metrics_path, &MetricsRecord::Step(r.clone()))
        };
        trainer.run_epoch(&source, &target, &mut sink)?;
        let last = trainer.is_done();
        let due = cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0;
        if !test.is_empty() && (due || last) {
            let report = trainer.evaluate(&test)?;
            log::info!("epoch {e}: target-test EPE {:.2} mm, AUC {:.3}", report.mean_epe_mm, report.auc);
            write_record(&mut log, &metrics_path, &MetricsRecord::Eval { epoch: e, report: report.clone() })?;
            last_eval = Some(report);
        }
        log.flush().map_err(io_err(&metrics_path))?;
        trainer.save_checkpoint(&ckpt_path)?;
    }
    Ok(RunSummary {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        last_eval,
        steps,
    })
}

fn write_record(w: &mut impl Write, path: &Path, rec: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(rec).expect("metrics serialize");
    writeln!(w, "{line}").map_err(io_err(path))
}
