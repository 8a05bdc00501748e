use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::depthreg::DepthImage;
use crate::error::{invalid_input, Result};
use crate::geometry::{to_pose25d, Keypoints3D, NormalizationSpec, Pose25D, NUM_KEYPOINTS};
use crate::posenet::{image_batch, PoseTensor};
use crate::toyhands::{read_manifest, Sample};

/// Fully labeled samples held in memory (the source domain).
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub image_size: usize,
    pub depth_size: usize,
    images: Vec<Vec<u8>>,
    poses: Vec<Pose25D>,
    depth: Vec<DepthImage>,
}

/// Weakly labeled samples: images, 2D keypoints and depth images only.
#[derive(Debug, Clone)]
pub struct WeakSet {
    pub image_size: usize,
    pub depth_size: usize,
    images: Vec<Vec<u8>>,
    kp2d: Vec<[[f64; 2]; NUM_KEYPOINTS]>,
    depth: Vec<DepthImage>,
}

pub struct SourceBatch {
    /// `(B, 3, S, S)` in [0, 1].
    pub images: Tensor,
    pub gt: PoseTensor,
    /// `(B, 1, D, D)`.
    pub depth: Tensor,
}

pub struct TargetBatch {
    pub images: Tensor,
    /// `(B, K, 2)` pixels.
    pub kp2d: Tensor,
    pub depth: Tensor,
    /// Always `None` for batches drawn from a [`WeakSet`]; the trainer rejects
    /// batches that carry 3D labels.
    pub kp3d: Option<Vec<Keypoints3D>>,
}

impl SourceBatch {
    pub fn len(&self) -> usize {
        self.gt.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TargetBatch {
    pub fn len(&self) -> usize {
        self.kp2d.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sizes(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| invalid_input("empty sample set"))?;
    let (s, d) = (first.image_size, first.depth.size);
    if samples.iter().any(|x| x.image_size != s || x.depth.size != d) {
        return Err(invalid_input("samples differ in image or depth size"));
    }
    Ok((s, d))
}

fn depth_batch(depth: &[DepthImage], idx: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let d = depth[idx[0]].size;
    let data: Vec<f32> = idx.iter().flat_map(|&i| depth[i].values.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (idx.len(), 1, d, d), device)?.to_dtype(dtype)?)
}

fn check_indices(idx: &[usize], len: usize) -> Result<()> {
    if idx.is_empty() || idx.iter().any(|&i| i >= len) {
        return Err(invalid_input(format!("batch indices must be non-empty and below {len}")));
    }
    Ok(())
}

impl LabeledSet {
    pub fn from_samples(samples: &[Sample], spec: &NormalizationSpec) -> Result<Self> {
        let (image_size, depth_size) = sizes(samples)?;
        let mut poses = Vec::with_capacity(samples.len());
        for s in samples {
            let mut p = to_pose25d(&s.kp3d, &s.intrinsics, spec)?;
            p.uv = s.kp2d;
            poses.push(p);
        }
        Ok(Self {
            image_size,
            depth_size,
            images: samples.iter().map(|s| s.image.clone()).collect(),
            poses,
            depth: samples.iter().map(|s| s.depth.clone()).collect(),
        })
    }

    pub fn load(manifest: &Path, spec: &NormalizationSpec) -> Result<Self> {
        Self::from_samples(&read_manifest(manifest)?.load_all()?, spec)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, idx: &[usize], dtype: DType, device: &Device) -> Result<SourceBatch> {
        check_indices(idx, self.len())?;
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        let poses: Vec<Pose25D> = idx.iter().map(|&i| self.poses[i]).collect();
        Ok(SourceBatch {
            images: image_batch(&imgs, self.image_size, dtype, device)?,
            gt: PoseTensor::from_poses(&poses, dtype, device)?,
            depth: depth_batch(&self.depth, idx, dtype, device)?,
        })
    }
}

impl WeakSet {
    /// Keeps images, 2D keypoints and depth images; 3D labels are dropped here.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let (image_size, depth_size) = sizes(samples)?;
        Ok(Self {
            image_size,
            depth_size,
            images: samples.iter().map(|s| s.image.clone()).collect(),
            kp2d: samples.iter().map(|s| s.kp2d).collect(),
            depth: samples.iter().map(|s| s.depth.clone()).collect(),
        })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        Self::from_samples(&read_manifest(manifest)?.load_all()?)
    }

    pub(super) fn empty(image_size: usize, depth_size: usize) -> Self {
        Self {
            image_size,
            depth_size,
            images: Vec::new(),
            kp2d: Vec::new(),
            depth: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, idx: &[usize], dtype: DType, device: &Device) -> Result<TargetBatch> {
        check_indices(idx, self.len())?;
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        let uv: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.kp2d[i].iter().flatten().copied())
            .collect();
        Ok(TargetBatch {
            images: image_batch(&imgs, self.image_size, dtype, device)?,
            kp2d: Tensor::from_vec(uv, (idx.len(), NUM_KEYPOINTS, 2), device)?.to_dtype(dtype)?,
            depth: depth_batch(&self.depth, idx, dtype, device)?,
            kp3d: None,
        })
    }
}
