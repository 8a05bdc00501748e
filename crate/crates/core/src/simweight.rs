//! Channel-wise feature similarity between the two domains and the weighting of
//! latent features before they reach the critic.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::error::AwhError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(invalid_input(format!("unknown domain `{other}`"))),
        }
    }
}

/// Batched latent features `(B, C, H, W)` tagged with their domain.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    values: Tensor,
    domain: Domain,
}

impl FeatureMap {
    pub fn new(values: Tensor, domain: Domain) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(invalid_input(format!(
                "feature map must be a non-empty (B, C, H, W) tensor, got {dims:?}"
            )));
        }
        Ok(Self { values, domain })
    }

    /// Like [`FeatureMap::new`] but also rejects non-finite entries.
    pub fn checked(values: Tensor, domain: Domain) -> Result<Self> {
        let fm = Self::new(values, domain)?;
        let sum = fm.values.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !sum.is_finite() {
            return Err(invalid_input("feature map contains non-finite values"));
        }
        Ok(fm)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            domain: self.domain,
        }
    }
}

/// Per-channel similarity weights, one entry per latent channel.
#[derive(Debug, Clone)]
pub struct ChannelWeights {
    alpha: Tensor,
}

impl ChannelWeights {
    pub fn from_tensor(alpha: Tensor) -> Result<Self> {
        if alpha.rank() != 1 {
            return Err(invalid_input("channel weights must be a vector"));
        }
        Ok(Self { alpha })
    }

    pub fn from_slice(alpha: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Self> {
        let t = Tensor::from_slice(alpha, alpha.len(), device)?.to_dtype(dtype)?;
        Self::from_tensor(t)
    }

    pub fn ones(channels: usize, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        Self::from_tensor(Tensor::ones(channels, dtype, device)?)
    }

    pub fn len(&self) -> usize {
        self.alpha.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.alpha
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(self.alpha.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn detach(&self) -> Self {
        Self {
            alpha: self.alpha.detach(),
        }
    }

    /// Negative similarities replaced by zero.
    pub fn clamp_negative(&self) -> Result<Self> {
        Ok(Self {
            alpha: self.alpha.relu()?,
        })
    }

    pub fn summary(&self) -> Result<AlphaSummary> {
        let v = self.values()?;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(AlphaSummary { min, mean, max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Batch-mean map per channel, flattened to `(C, H*W)` and L2-normalized row by
/// row. All-zero rows stay zero.
fn normalized_channel_maps(z: &FeatureMap) -> Result<Tensor> {
    let (_, c, h, w) = z.values.dims4()?;
    let mean = z.values.mean(0)?.reshape((c, h * w))?;
    let norm = mean.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    // zero rows divide 0 by the floor, leaving them at zero
    let floor = match z.values.dtype() {
        DType::F64 => 1e-300,
        _ => 1e-30,
    };
    let safe = norm.maximum(floor)?;
    Ok(mean.broadcast_div(&safe)?)
}

/// Cosine similarity, channel by channel, between the batch-mean latent maps of
/// the source and target batches.
///
/// The result stays attached to the autodiff graph; callers that want the
/// weights treated as constants call [`ChannelWeights::detach`].
pub fn channel_similarity(z_s: &FeatureMap, z_t: &FeatureMap) -> Result<ChannelWeights> {
    let (_, cs, hs, ws) = z_s.values.dims4()?;
    let (_, ct, ht, wt) = z_t.values.dims4()?;
    if (cs, hs, ws) != (ct, ht, wt) {
        return Err(invalid_input(format!(
            "feature shapes differ: ({cs}, {hs}, {ws}) vs ({ct}, {ht}, {wt})"
        )));
    }
    if z_s.domain == z_t.domain {
        return Err(invalid_input(
            "channel similarity needs one source and one target feature map",
        ));
    }
    let a = normalized_channel_maps(z_s)?;
    let b = normalized_channel_maps(z_t)?;
    ChannelWeights::from_tensor((a * b)?.sum(D::Minus1)?)
}

/// Scales channel `i` of `z` by `alpha[i]`.
pub fn apply_weights(z: &FeatureMap, w: &ChannelWeights) -> Result<FeatureMap> {
    let c = z.channels();
    if w.len() != c {
        return Err(invalid_input(format!(
            "{} channel weights for a {}-channel feature map",
            w.len(),
            c
        )));
    }
    let alpha = w.alpha.to_dtype(z.values.dtype())?.reshape((1, c, 1, 1))?;
    FeatureMap::new(z.values.broadcast_mul(&alpha)?, z.domain)
}
