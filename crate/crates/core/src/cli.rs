//! Command-line front end: `gen`, `train`, `eval`, `project` and `oracle`.
//!
//! Exit status is 0 on success, 2 for usage errors and 1 for everything that
//! fails after the arguments parsed (bad configs, unreadable manifests, failed
//! oracle checks).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Result};
use crate::eval::{evaluate, project_features, write_scatter_csv, PckRange};
use crate::oracle;
use crate::posenet::PoseNet;
use crate::toyhands::{generate_dataset, read_manifest, ToyConfig};
use crate::trainer::{checkpoint_config, run, RunPaths, TrainConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "awh", version, about = "Similarity-weighted Wasserstein adaptation for 2.5D hand pose")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size defaults (128 px images).
    Full,
    /// Reduced sizes for single-core machines (64 px images).
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a toy two-domain dataset.
    Gen {
        /// Output directory for images, depth maps and manifests.
        #[arg(long)]
        out: PathBuf,
        /// Dataset config (TOML); missing keys take the preset's defaults.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Pretrain and adapt; writes metrics.jsonl, config.toml and a checkpoint.
    Train {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory written by `gen`.
        #[arg(long, conflicts_with_all = ["manifest", "target", "test"], required_unless_present = "manifest")]
        data: Option<PathBuf>,
        /// Source (fully labeled) manifest.
        #[arg(long, requires = "target")]
        manifest: Option<PathBuf>,
        /// Target (weakly labeled) manifest.
        #[arg(long, requires = "manifest")]
        target: Option<PathBuf>,
        /// Target test manifest for periodic evaluation.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Training config (TOML).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to resume from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest: EPE, PCK curve and AUC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for report.json and pck.csv; the report is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        /// PCK thresholds in mm, `lo-hi` or `lo-hi:step`.
        #[arg(long, default_value = "20-50")]
        range: PckRange,
        /// Training config whose normalization is used; defaults to the one
        /// stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export a 2D PCA projection of pooled encoder features from both domains.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Target manifest.
        #[arg(long)]
        target: PathBuf,
        /// Output CSV (`x,y,domain`).
        #[arg(long)]
        out: PathBuf,
        /// Total samples, half from each domain.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Seed for choosing which samples are projected.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the calibration and gradient checks and print one line per check.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command, returning
/// the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Runs one command. `Ok(false)` reports a completed command whose checks
/// failed.
pub fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Gen {
            out,
            config,
            preset,
            seed,
            threads,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => ToyConfig::from_toml_file(&path)?,
                (None, Preset::Full) => ToyConfig::default(),
                (None, Preset::Desk) => ToyConfig::desk(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifests = generate_dataset(&cfg, &out, threads.max(1))?;
            let config_path = out.join("toyhands.toml");
            std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
            for m in &manifests {
                println!("{}: {} samples", m.path.display(), m.len());
            }
            Ok(true)
        }
        Command::Train {
            out,
            data,
            manifest,
            target,
            test,
            config,
            preset,
            seed,
            ckpt,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => TrainConfig::from_toml_file(&path)?,
                (None, Preset::Full) => TrainConfig::default(),
                (None, Preset::Desk) => TrainConfig::desk(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut paths = match (data, manifest, target) {
                (Some(dir), _, _) => RunPaths::from_dataset(&dir, &out),
                (None, Some(source), Some(target)) => RunPaths {
                    source,
                    target,
                    test,
                    out_dir: out,
                    resume: None,
                },
                _ => unreachable!("clap enforces a data source"),
            };
            paths.resume = ckpt;
            let summary = run(&cfg, &paths)?;
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("metrics: {}", summary.metrics.display());
            if let Some(r) = summary.last_eval {
                println!("target-test mean EPE {:.3} mm, AUC {:.4}", r.mean_epe_mm, r.auc);
            }
            Ok(true)
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            range,
            config,
        } => {
            let cfg = match config {
                Some(path) => TrainConfig::from_toml_file(&path)?,
                None => checkpoint_config(&ckpt)?,
            };
            let net = PoseNet::load(&ckpt, DType::F32, &Device::Cpu)?;
            let samples = read_manifest(&manifest)?.load_all()?;
            let report = evaluate(&net, &samples, &cfg.normalization(), range)?;
            println!("{}", report.to_json());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                report.write_json(&dir.join("report.json"))?;
                report.write_pck_csv(&dir.join("pck.csv"))?;
            }
            Ok(true)
        }
        Command::Project {
            ckpt,
            manifest,
            target,
            out,
            samples,
            seed,
        } => {
            let net = PoseNet::load(&ckpt, DType::F32, &Device::Cpu)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let half = samples / 2;
            let source = load_subset(&manifest, half, &mut rng)?;
            let target = load_subset(&target, samples - half, &mut rng)?;
            let points = project_features(&net, &source, &target, samples)?;
            write_scatter_csv(&points, &out)?;
            println!("{} points written to {}", points.len(), out.display());
            Ok(true)
        }
        Command::Oracle { seed, out } => {
            let checks = oracle::run_all(seed)?;
            let lines: Vec<String> = checks.iter().map(|c| c.to_string()).collect();
            for l in &lines {
                println!("{l}");
            }
            if let Some(path) = out {
                write_lines(&path, &lines)?;
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

/// Up to `n` samples of a manifest chosen without replacement.
fn load_subset(path: &Path, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<crate::toyhands::Sample>> {
    let m = read_manifest(path)?;
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| m.load_sample(i)).collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}
