//! Depth regularizer: normalized depth targets, a small generator that renders a
//! normalized depth image from 2D keypoints and predicted normalized depths, and
//! the mean-L1 loss between depth images.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::geometry::NUM_KEYPOINTS;
use crate::nn::{leaky_relu, Conv2d, ParamStore};

/// Default depth-image side length.
pub const DEPTH_SIZE: usize = 32;

/// Gaussian splat width, in depth-image pixels.
pub const SPLAT_SIGMA: f64 = 1.5;

const GENERATOR_WIDTH: usize = 32;

/// Far bound and depth extent of one hand, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNormSpec {
    pub d_max: f64,
    pub d_range: f64,
}

impl DepthNormSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_range > 0.0) || !self.d_max.is_finite() {
            return Err(invalid_config(format!(
                "depth range must be positive, got {}",
                self.d_range
            )));
        }
        Ok(())
    }

    /// `clamp((d_max - d) / d_range, 0, 1)`.
    pub fn normalize(&self, depth_mm: f64) -> f64 {
        ((self.d_max - depth_mm) / self.d_range).clamp(0.0, 1.0)
    }
}

/// Row-major square depth image with values in [0, 1]; background is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub size: usize,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size {
            return Err(invalid_input(format!(
                "depth image of side {size} needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_input("depth image values must lie in [0, 1]"));
        }
        Ok(Self { size, values })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.size + col]
    }

    /// Values rounded to the 16-bit storage grid.
    pub fn to_u16(&self) -> Vec<u16> {
        self.values
            .iter()
            .map(|&v| (f64::from(v) * 65535.0).round() as u16)
            .collect()
    }

    pub fn from_u16(size: usize, data: &[u16]) -> Result<Self> {
        Self::new(size, data.iter().map(|&q| q as f32 / 65535.0).collect())
    }

    /// Snaps values onto the 16-bit grid so a write/read cycle is lossless.
    pub fn quantized(&self) -> Self {
        Self::from_u16(self.size, &self.to_u16()).expect("quantized values stay in range")
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.size, self.size), device)?.to_dtype(dtype)?)
    }
}

/// Per-pixel normalization of a raw depth map (mm); pixels outside `mask` are 0.
pub fn normalize_depth(
    raw_mm: &[f64],
    mask: &[bool],
    size: usize,
    spec: &DepthNormSpec,
) -> Result<DepthImage> {
    spec.validate()?;
    if raw_mm.len() != size * size || mask.len() != size * size {
        return Err(invalid_input("raw depth and mask must match the image size"));
    }
    let values = raw_mm
        .iter()
        .zip(mask)
        .map(|(&d, &fg)| if fg { spec.normalize(d) as f32 } else { 0.0 })
        .collect();
    DepthImage::new(size, values)
}

/// Mean absolute difference between two depth images.
pub fn loss_depth(rendered: &DepthImage, gt: &DepthImage) -> Result<f64> {
    if rendered.size != gt.size {
        return Err(invalid_input(format!(
            "depth resolutions differ: {} vs {}",
            rendered.size, gt.size
        )));
    }
    let sum: f64 = rendered
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum();
    Ok(sum / rendered.values.len() as f64)
}

/// Batched form of [`loss_depth`] on `(B, 1, D, D)` tensors: mean over every pixel
/// of every image.
pub fn loss_depth_tensor(rendered: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if rendered.dims() != gt.dims() {
        return Err(invalid_input(format!(
            "depth tensors differ in shape: {:?} vs {:?}",
            rendered.dims(),
            gt.dims()
        )));
    }
    Ok((rendered - gt)?.abs()?.mean_all()?)
}

/// Renders a normalized depth image from keypoint locations and normalized depths.
///
/// Each keypoint is splatted as a Gaussian on the depth grid with amplitude equal
/// to its normalized depth; one extra channel holds the unit-amplitude splats so
/// the network also sees where keypoints with zero depth lie. Three convolutions
/// with leaky ReLUs follow and the output is clamped to [0, 1].
#[derive(Debug, Clone)]
pub struct DepthGenerator {
    store: ParamStore,
    convs: [Conv2d; 3],
    image_size: usize,
    depth_size: usize,
}

impl DepthGenerator {
    pub fn new(
        image_size: usize,
        depth_size: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if depth_size == 0 || image_size < depth_size {
            return Err(invalid_config("depth size must be positive and at most the image size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c_in = NUM_KEYPOINTS + 1;
        let w = GENERATOR_WIDTH;
        let convs = [
            Conv2d::new(&mut store, "conv1", c_in, w, 3, 1, 1.0, &mut rng, dtype, device)?,
            Conv2d::new(&mut store, "conv2", w, w, 3, 1, 1.0, &mut rng, dtype, device)?,
            Conv2d::new(&mut store, "conv3", w, 1, 3, 1, 0.5, &mut rng, dtype, device)?,
        ];
        Ok(Self {
            store,
            convs,
            image_size,
            depth_size,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn depth_size(&self) -> usize {
        self.depth_size
    }

    /// Unit-amplitude Gaussian splats `(B, K, D, D)` for keypoints `(B, K, 2)` given
    /// in input-image pixels. Carries no gradient.
    pub fn splats(&self, uv: &Tensor) -> Result<Tensor> {
        let (b, k, two) = uv.dims3()?;
        if two != 2 || k != NUM_KEYPOINTS {
            return Err(invalid_input(format!("keypoints must be (B, {NUM_KEYPOINTS}, 2)")));
        }
        let d = self.depth_size;
        let scale = self.image_size as f64 / d as f64;
        let dtype = uv.dtype();
        let device = uv.device();
        // image pixel centers to depth-grid coordinates
        let grid = uv.detach().affine(1.0 / scale, 0.5 / scale - 0.5)?;
        let gu = grid.narrow(2, 0, 1)?.reshape((b, k, 1, 1))?;
        let gv = grid.narrow(2, 1, 1)?.reshape((b, k, 1, 1))?;
        let axis = Tensor::arange(0u32, d as u32, device)?.to_dtype(dtype)?;
        let cols = axis.reshape((1, 1, 1, d))?;
        let rows = axis.reshape((1, 1, d, 1))?;
        let du = cols.broadcast_sub(&gu)?.sqr()?;
        let dv = rows.broadcast_sub(&gv)?.sqr()?;
        let r2 = du.broadcast_add(&dv)?;
        Ok((r2 * (-0.5 / (SPLAT_SIGMA * SPLAT_SIGMA)))?.exp()?)
    }

    /// `(B, K, 2)` keypoints and `(B, K)` normalized depths to `(B, 1, D, D)` images
    /// in [0, 1]. Differentiable in `z_n` and the generator parameters wherever the
    /// output clamp is inactive.
    pub fn render(&self, uv: &Tensor, z_n: &Tensor) -> Result<Tensor> {
        let g = self.splats(uv)?;
        let (b, k, _, _) = g.dims4()?;
        if z_n.dims() != [b, k] {
            return Err(invalid_input(format!(
                "normalized depths must be ({b}, {k}), got {:?}",
                z_n.dims()
            )));
        }
        let amp = g.broadcast_mul(&z_n.reshape((b, k, 1, 1))?)?;
        let presence = g.sum_keepdim(1)?;
        let mut x = Tensor::cat(&[&amp, &presence], 1)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < 2 {
                x = leaky_relu(&x, 0.1)?;
            }
        }
        Ok(x.clamp(0.0, 1.0)?)
    }

    /// Single-sample convenience wrapper around [`DepthGenerator::render`].
    pub fn render_depth(
        &self,
        gt2d: &[[f64; 2]; NUM_KEYPOINTS],
        pred_zn: &[f64; NUM_KEYPOINTS],
    ) -> Result<DepthImage> {
        let (dtype, device) = self.dtype_device();
        let uv: Vec<f64> = gt2d.iter().flatten().copied().collect();
        let uv = Tensor::from_vec(uv, (1, NUM_KEYPOINTS, 2), &device)?.to_dtype(dtype)?;
        let zn = Tensor::from_slice(pred_zn, (1, NUM_KEYPOINTS), &device)?.to_dtype(dtype)?;
        let img = self.render(&uv, &zn)?;
        let values = img.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        DepthImage::new(self.depth_size, values)
    }

    fn dtype_device(&self) -> (DType, Device) {
        let (_, v) = self.store.iter().next().expect("generator has parameters");
        (v.dtype(), v.device().clone())
    }
}
