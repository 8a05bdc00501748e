//! Stacked hourglass regressor: an encoder to the latent feature map, hourglass
//! stacks with skip connections producing latent 2.5D heatmaps, a soft-argmax
//! readout, and the 2.5D regression losses.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, AwhError, Result};
use crate::geometry::{Pose25D, NUM_KEYPOINTS};
use crate::nn::{self, softmax_last, upsample_bilinear2x, Conv2d, ParamStore};
use crate::simweight::{Domain, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HourglassConfig {
    pub stacks: usize,
    pub latent_channels: usize,
    /// Side of the square latent map; heatmaps are twice this size.
    pub latent_size: usize,
    pub image_size: usize,
    /// Down/up levels per hourglass.
    pub levels: usize,
    pub skip_connections: bool,
    pub intermediate_tap: bool,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            latent_channels: 64,
            latent_size: 16,
            image_size: 128,
            levels: 3,
            skip_connections: true,
            intermediate_tap: false,
        }
    }
}

impl HourglassConfig {
    /// Single-core profile matching the 64 px desk dataset.
    pub fn desk() -> Self {
        Self {
            latent_channels: 16,
            latent_size: 8,
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn heatmap_size(&self) -> usize {
        2 * self.latent_size
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 8 && v.is_power_of_two();
        if self.stacks == 0 {
            return Err(invalid_config("hourglass needs at least one stack"));
        }
        if !pow2(self.latent_channels) || !pow2(self.latent_size) || !pow2(self.image_size) {
            return Err(invalid_config(
                "latent channels, latent size and image size must be powers of two >= 8",
            ));
        }
        if self.image_size < 4 * self.latent_size {
            return Err(invalid_config("image size must be at least 4x the latent size"));
        }
        if self.levels == 0 || self.latent_size >> self.levels == 0 {
            return Err(invalid_config(format!(
                "{} hourglass levels do not fit a {}x{} latent map",
                self.levels, self.latent_size, self.latent_size
            )));
        }
        if self.intermediate_tap && self.stacks < 2 {
            return Err(invalid_config("intermediate supervision needs at least two stacks"));
        }
        Ok(())
    }
}

/// Pre-activation residual block `x + conv(relu(conv(relu(x))))`.
#[derive(Debug, Clone)]
struct Residual {
    a: Conv2d,
    b: Conv2d,
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), c, c, 3, 1, 1.0, rng, dtype, device)?,
            b: Conv2d::new(store, &format!("{name}.b"), c, c, 3, 1, 0.1, rng, dtype, device)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&nn::sample_norm(&self.a.forward(&nn::sample_norm(x)?.relu()?)?)?.relu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    skip: Option<Residual>,
    down: Residual,
    up: Residual,
}

#[derive(Debug, Clone)]
struct Hourglass {
    levels: Vec<Level>,
    bottom: Residual,
}

impl Hourglass {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.level(0, x)
    }

    fn level(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let lv = &self.levels[i];
        let low = lv.down.forward(&x.avg_pool2d(2)?)?;
        let low = if i + 1 < self.levels.len() {
            self.level(i + 1, &low)?
        } else {
            self.bottom.forward(&low)?
        };
        let up = upsample_bilinear2x(&lv.up.forward(&low)?)?;
        match &lv.skip {
            Some(s) => Ok((s.forward(x)? + up)?),
            None => Ok(up),
        }
    }
}

#[derive(Debug, Clone)]
struct Stack {
    hourglass: Hourglass,
    post: Residual,
    head: Conv2d,
    merge: Option<(Conv2d, Conv2d)>,
}

/// Per-keypoint localization logits and latent depth maps, each `(B, K, H, W)`.
#[derive(Debug, Clone)]
pub struct LatentHeatmaps25D {
    pub heat2d: Tensor,
    pub depthmaps: Tensor,
}

/// Batched 2.5D readout: `uv` is `(B, K, 2)` in input pixels, `z_n` is `(B, K)`.
#[derive(Debug, Clone)]
pub struct PoseTensor {
    pub uv: Tensor,
    pub z_n: Tensor,
}

impl PoseTensor {
    pub fn batch(&self) -> usize {
        self.z_n.dims()[0]
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            uv: self.uv.narrow(0, start, len)?,
            z_n: self.z_n.narrow(0, start, len)?,
        })
    }

    pub fn to_poses(&self) -> Result<Vec<Pose25D>> {
        let uv = self.uv.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let z = self.z_n.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut out = Vec::with_capacity(uv.len());
        for (u, z) in uv.iter().zip(&z) {
            let mut p = Pose25D {
                uv: [[0.0; 2]; NUM_KEYPOINTS],
                z_n: [0.0; NUM_KEYPOINTS],
            };
            for k in 0..NUM_KEYPOINTS {
                p.uv[k] = [u[k][0], u[k][1]];
                p.z_n[k] = z[k];
            }
            out.push(p);
        }
        Ok(out)
    }

    pub fn from_poses(poses: &[Pose25D], dtype: DType, device: &Device) -> Result<Self> {
        let b = poses.len();
        let uv: Vec<f64> = poses.iter().flat_map(|p| p.uv.iter().flatten().copied()).collect();
        let z: Vec<f64> = poses.iter().flat_map(|p| p.z_n.iter().copied()).collect();
        Ok(Self {
            uv: Tensor::from_vec(uv, (b, NUM_KEYPOINTS, 2), device)?.to_dtype(dtype)?,
            z_n: Tensor::from_vec(z, (b, NUM_KEYPOINTS), device)?.to_dtype(dtype)?,
        })
    }
}

/// Output of [`PoseNet::regress`]: heatmaps of every stack and the readout of the
/// last one. `intermediate` holds the first stack's readout when the tap is on.
#[derive(Debug, Clone)]
pub struct Regression {
    pub heatmaps: Vec<LatentHeatmaps25D>,
    pub pose: PoseTensor,
    pub intermediate: Option<PoseTensor>,
}

impl Regression {
    pub fn intermediate_outputs(&self) -> Option<&LatentHeatmaps25D> {
        self.intermediate.as_ref().map(|_| &self.heatmaps[0])
    }
}

/// Spatial soft-argmax of `heat2d` plus the softmax-weighted depth readout.
///
/// Cell `(r, c)` of a `W`-wide map covers input pixels whose center is
/// `(c + 0.5) * image_size / W - 0.5`.
pub fn soft_argmax(heat: &LatentHeatmaps25D, image_size: usize) -> Result<PoseTensor> {
    let (b, k, h, w) = heat.heat2d.dims4()?;
    if heat.depthmaps.dims() != heat.heat2d.dims() {
        return Err(invalid_input("heatmap and depth map shapes differ"));
    }
    let dtype = heat.heat2d.dtype();
    let device = heat.heat2d.device();
    let p = softmax_last(&heat.heat2d.reshape((b, k, h * w))?)?;
    let sx = image_size as f64 / w as f64;
    let sy = image_size as f64 / h as f64;
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            gx.push((c as f64 + 0.5) * sx - 0.5);
            gy.push((r as f64 + 0.5) * sy - 0.5);
        }
    }
    let grid = Tensor::from_vec([gx, gy].concat(), (2, h * w), device)?
        .to_dtype(dtype)?
        .t()?;
    let uv = p.broadcast_matmul(&grid)?;
    let z_n = (p * heat.depthmaps.reshape((b, k, h * w))?)?.sum(D::Minus1)?;
    Ok(PoseTensor { uv, z_n })
}

/// The hourglass regressor.
#[derive(Debug, Clone)]
pub struct PoseNet {
    cfg: HourglassConfig,
    store: ParamStore,
    stem: Vec<Conv2d>,
    stem_res: Residual,
    to_latent: Conv2d,
    latent_res: Residual,
    stacks: Vec<Stack>,
}

impl PoseNet {
    pub fn new(cfg: HourglassConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.latent_channels;
        let k2 = 2 * NUM_KEYPOINTS;
        let rng = &mut rng;

        let n_stem = (cfg.image_size / cfg.heatmap_size()).trailing_zeros() as usize;
        let mut stem = Vec::with_capacity(n_stem);
        let mut ch = 3;
        for i in 0..n_stem {
            let out = if i + 1 == n_stem { c } else { c / 2 };
            stem.push(Conv2d::new(&mut store, &format!("stem{i}"), ch, out, 3, 2, 1.0, rng, dtype, device)?);
            ch = out;
        }
        let stem_res = Residual::new(&mut store, "stem_res", c, rng, dtype, device)?;
        let to_latent = Conv2d::new(&mut store, "to_latent", c, c, 3, 2, 1.0, rng, dtype, device)?;
        let latent_res = Residual::new(&mut store, "latent_res", c, rng, dtype, device)?;

        let mut stacks = Vec::with_capacity(cfg.stacks);
        for s in 0..cfg.stacks {
            let mut levels = Vec::with_capacity(cfg.levels);
            for l in 0..cfg.levels {
                let name = format!("stack{s}.hg{l}");
                let skip = if cfg.skip_connections {
                    Some(Residual::new(&mut store, &format!("{name}.skip"), c, rng, dtype, device)?)
                } else {
                    None
                };
                levels.push(Level {
                    skip,
                    down: Residual::new(&mut store, &format!("{name}.down"), c, rng, dtype, device)?,
                    up: Residual::new(&mut store, &format!("{name}.up"), c, rng, dtype, device)?,
                });
            }
            let bottom = Residual::new(&mut store, &format!("stack{s}.bottom"), c, rng, dtype, device)?;
            let post = Residual::new(&mut store, &format!("stack{s}.post"), c, rng, dtype, device)?;
            let head = Conv2d::new(&mut store, &format!("stack{s}.head"), c, k2, 1, 1, 0.1, rng, dtype, device)?;
            let merge = if s + 1 < cfg.stacks {
                Some((
                    Conv2d::new(&mut store, &format!("stack{s}.merge_f"), c, c, 1, 1, 0.1, rng, dtype, device)?,
                    Conv2d::new(&mut store, &format!("stack{s}.merge_h"), k2, c, 1, 1, 0.1, rng, dtype, device)?,
                ))
            } else {
                None
            };
            stacks.push(Stack {
                hourglass: Hourglass { levels, bottom },
                post,
                head,
                merge,
            });
        }
        Ok(Self {
            cfg,
            store,
            stem,
            stem_res,
            to_latent,
            latent_res,
            stacks,
        })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, 3, S, S)` images with values in [0, 1] to the `(B, C, L, L)` latent map.
    pub fn encode(&self, images: &Tensor, domain: Domain) -> Result<FeatureMap> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.cfg.image_size;
        if (c, h, w) != (3, s, s) {
            return Err(invalid_input(format!(
                "expected images of shape (B, 3, {s}, {s}), got {:?}",
                images.dims()
            )));
        }
        let mut x = images.affine(1.0, -0.5)?;
        for conv in &self.stem {
            x = conv.forward(&x)?.relu()?;
        }
        x = self.stem_res.forward(&x)?;
        x = self.to_latent.forward(&x)?;
        x = self.latent_res.forward(&x)?;
        FeatureMap::new(x, domain)
    }

    /// Decodes latent features into per-stack heatmaps and reads out 2.5D poses.
    pub fn regress(&self, features: &FeatureMap) -> Result<Regression> {
        let mut x = features.values().clone();
        let mut heatmaps = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            let f = stack.post.forward(&stack.hourglass.forward(&x)?)?;
            let heads = stack.head.forward(&upsample_bilinear2x(&f)?)?;
            if let Some((mf, mh)) = &stack.merge {
                x = ((x + mf.forward(&f)?)? + mh.forward(&heads.avg_pool2d(2)?)?)?;
            }
            heatmaps.push(LatentHeatmaps25D {
                heat2d: heads.narrow(1, 0, NUM_KEYPOINTS)?,
                depthmaps: heads.narrow(1, NUM_KEYPOINTS, NUM_KEYPOINTS)?,
            });
        }
        let pose = soft_argmax(heatmaps.last().expect("at least one stack"), self.cfg.image_size)?;
        let intermediate = if self.cfg.intermediate_tap {
            Some(soft_argmax(&heatmaps[0], self.cfg.image_size)?)
        } else {
            None
        };
        Ok(Regression {
            heatmaps,
            pose,
            intermediate,
        })
    }

    pub fn forward(&self, images: &Tensor, domain: Domain) -> Result<(FeatureMap, Regression)> {
        let z = self.encode(images, domain)?;
        let r = self.regress(&z)?;
        Ok((z, r))
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.store.named_tensors(prefix)
    }

    /// Metadata entry describing the architecture inside a checkpoint.
    pub fn metadata(&self) -> (String, String) {
        (
            "hourglass".into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        )
    }

    /// Rebuilds a network from checkpoint tensors stored under `prefix`.
    pub fn from_tensors(
        cfg: HourglassConfig,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let net = Self::new(cfg, 0, dtype, device)?;
        net.store.load_from(tensors, prefix)?;
        Ok(net)
    }

    /// Loads the network of a checkpoint written by the trainer.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let archive = nn::load_archive(path, device)?;
        let raw = archive.metadata.get("hourglass").ok_or_else(|| AwhError::Checkpoint {
            path: path.to_path_buf(),
            message: "missing hourglass metadata".into(),
        })?;
        let cfg: HourglassConfig = serde_json::from_str(raw).map_err(|e| AwhError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("bad hourglass metadata: {e}"),
        })?;
        Self::from_tensors(cfg, &archive.tensors, POSENET_PREFIX, dtype, device)
    }
}

/// Tensor-name prefix of the regressor inside checkpoints.
pub const POSENET_PREFIX: &str = "posenet.";

/// `(B, 3, S, S)` tensor in [0, 1] from row-major 8-bit RGB buffers.
pub fn image_batch(images: &[&[u8]], size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = size * size * 3;
    let mut data = Vec::with_capacity(images.len() * n);
    for img in images {
        if img.len() != n {
            return Err(invalid_input(format!("image buffer has {} bytes, expected {n}", img.len())));
        }
        data.extend(img.iter().map(|&v| v as f32 / 255.0));
    }
    let t = Tensor::from_vec(data, (images.len(), size, size, 3), device)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

/// Batch mean of per-sample `sum_k |du| + |dv|`.
pub fn loss_2d_tensor(pred_uv: &Tensor, gt_uv: &Tensor) -> Result<Tensor> {
    Ok((pred_uv - gt_uv)?.abs()?.sum(D::Minus1)?.sum(D::Minus1)?.mean_all()?)
}

/// Batch mean of per-sample `sum_k |dz|`.
pub fn loss_depth_term_tensor(pred_z: &Tensor, gt_z: &Tensor) -> Result<Tensor> {
    Ok((pred_z - gt_z)?.abs()?.sum(D::Minus1)?.mean_all()?)
}

pub fn loss_25d_tensor(pred: &PoseTensor, gt: &PoseTensor, lambda_alpha: f64) -> Result<Tensor> {
    let l2 = loss_2d_tensor(&pred.uv, &gt.uv)?;
    let lz = loss_depth_term_tensor(&pred.z_n, &gt.z_n)?;
    Ok((l2 + (lz * lambda_alpha)?)?)
}

pub fn loss_25d(pred: &Pose25D, gt: &Pose25D, lambda_alpha: f64) -> f64 {
    loss_2d(pred, &gt.uv)
        + lambda_alpha
            * pred
                .z_n
                .iter()
                .zip(&gt.z_n)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
}

pub fn loss_2d(pred: &Pose25D, gt2d: &[[f64; 2]; NUM_KEYPOINTS]) -> f64 {
    pred.uv
        .iter()
        .zip(gt2d)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
        .sum()
}
