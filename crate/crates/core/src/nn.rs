//! Minimal layer toolkit on top of candle: named parameter stores with seeded
//! initialization, convolution and dense layers, bilinear upsampling, Adam, and
//! the `awh-ckpt-v1` archive format.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{AwhError, Result};

/// Format tag written into every checkpoint's metadata.
pub const CHECKPOINT_FORMAT: &str = "awh-ckpt-v1";

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(AwhError::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        self.vars.push((name, var.clone()));
        Ok(var)
    }

    /// Registers an existing variable, sharing its storage.
    pub fn insert_var(&mut self, name: impl Into<String>, var: &Var) -> Result<()> {
        let name = name.into();
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(AwhError::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.vars.push((name, var.clone()));
        Ok(())
    }

    /// One store holding the variables of `parts`, names prefixed.
    pub fn merged(parts: &[(&str, &ParamStore)]) -> Result<Self> {
        let mut out = Self::new();
        for (prefix, store) in parts {
            for (name, var) in store.iter() {
                out.insert_var(format!("{prefix}{name}"), var)?;
            }
        }
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copies of the current values, in store order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .vars
            .iter()
            .map(|(_, v)| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(AwhError::InvalidInput("snapshot size mismatch".into()));
        }
        for ((_, var), t) in self.vars.iter().zip(values) {
            var.set(t)?;
        }
        Ok(())
    }

    /// Flattens every parameter into one f64 vector (test and diagnostics helper).
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, v) in &self.vars {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors[prefix + name]`.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| AwhError::InvalidInput(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(AwhError::InvalidInput(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Gaussian tensor drawn from a seeded stream.
pub fn randn(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Square-kernel 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            randn(rng, &[out_ch, in_ch, kernel, kernel], std, dtype, device)?,
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(out_ch, dtype, device)?)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// Convolution as patch extraction plus one matrix product; the backward pass
    /// is then gemm and copies, which is much faster than candle's direct
    /// transposed convolution on CPU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (co, ci, k, _) = self.weight.dims4()?;
        if c != ci {
            return Err(AwhError::InvalidInput(format!(
                "convolution expects {ci} input channels, got {c}"
            )));
        }
        let (s, p) = (self.stride, self.padding);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let cols = if k == 1 && s == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(strided_window(&xp, dy, dx, ho, wo, s)?);
                }
            }
            Tensor::stack(&taps, 2)?.reshape((b, c * k * k, ho * wo))?
        };
        let wm = self.weight.as_tensor().reshape((co, ci * k * k))?;
        let y = wm.broadcast_matmul(&cols)?.reshape((b, co, ho, wo))?;
        let bias = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// `x[:, :, dy + s*i, dx + s*j]` for `i < ho`, `j < wo`.
fn strided_window(x: &Tensor, dy: usize, dx: usize, ho: usize, wo: usize, s: usize) -> Result<Tensor> {
    let (b, c, hp, wp) = x.dims4()?;
    if s == 1 {
        return Ok(x.narrow(2, dy, ho)?.narrow(3, dx, wo)?);
    }
    // pad so the window spans whole strides, then keep every s-th row and column
    let need_h = dy + s * ho;
    let need_w = dx + s * wo;
    let x = x.pad_with_zeros(2, 0, need_h.saturating_sub(hp))?;
    let x = x.pad_with_zeros(3, 0, need_w.saturating_sub(wp))?;
    let x = x.narrow(2, dy, s * ho)?.narrow(3, dx, s * wo)?;
    let x = x.reshape((b, c, ho, s, wo, s))?;
    Ok(x.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((b, c, ho, wo))?)
}

/// Dense layer `y = x W^T + b` on `(batch, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let std = gain * (2.0 / in_dim as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            randn(rng, &[out_dim, in_dim], std, dtype, device)?,
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(out_dim, dtype, device)?)?;
        Ok(Self { weight, bias })
    }

    /// Builds a layer around existing variables (shape `(out, in)` and `(out,)`).
    pub fn from_vars(weight: Var, bias: Var) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Derivative of `leaky_relu` evaluated at `x` (1 where x > 0, `slope` elsewhere).
/// Carries no gradient.
pub fn leaky_relu_slope(x: &Tensor, slope: f64) -> Result<Tensor> {
    let mask = x.detach().gt(0.0)?.to_dtype(x.dtype())?;
    Ok(mask.affine(1.0 - slope, slope)?)
}

/// Per-sample normalization of `(B, C, H, W)` over channels and space.
pub fn sample_norm(x: &Tensor) -> Result<Tensor> {
    let flat = x.flatten_from(1)?;
    let mean = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let out = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(out.reshape(x.dims())?)
}

/// Softmax over the last dimension, composed of differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.detach().max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-interpolation matrix for 2x bilinear upsampling (half-pixel centers,
/// edge-clamped), shape `(2n, n)`.
fn upsample_matrix(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = 2 * n;
    let mut data = vec![0.0f64; m * n];
    for i in 0..m {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = src - lo as f64;
        data[i * n + lo] += 1.0 - frac;
        data[i * n + hi] += frac;
    }
    Ok(Tensor::from_vec(data, (m, n), device)?.to_dtype(dtype)?)
}

/// 2x bilinear upsampling of a `(B, C, H, W)` tensor.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = upsample_matrix(h, x.dtype(), x.device())?;
    let cols = upsample_matrix(w, x.dtype(), x.device())?.t()?.contiguous()?;
    let y = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Adam with bias correction and constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for (_, v) in params.iter() {
            first.push(v.as_tensor().zeros_like()?);
            second.push(v.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first,
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`. Parameters without a gradient keep
    /// their value and their moment estimates.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn named_state(&self, params: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("{prefix}m.{name}"), self.first[i].clone()));
            out.push((format!("{prefix}v.{name}"), self.second[i].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        params: &ParamStore,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
        step: u64,
    ) -> Result<()> {
        for (i, (name, var)) in params.iter().enumerate() {
            for (slot, tag) in [(&mut self.first[i], "m"), (&mut self.second[i], "v")] {
                let key = format!("{prefix}{tag}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| AwhError::InvalidInput(format!("missing tensor {key}")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Writes named tensors plus string metadata as one safetensors archive tagged
/// with [`CHECKPOINT_FORMAT`].
pub fn save_archive(
    path: &Path,
    tensors: &[(String, Tensor)],
    mut metadata: HashMap<String, String>,
) -> Result<()> {
    metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
    let ckpt_err = |message: String| AwhError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(
        contiguous.iter().map(|(n, t)| (n.as_str(), t)),
        Some(metadata),
        path,
    )
    .map_err(|e| ckpt_err(e.to_string()))
}

pub struct Archive {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

pub fn load_archive(path: &Path, device: &Device) -> Result<Archive> {
    let ckpt_err = |message: String| AwhError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(crate::error::io_err(path))?;
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    match metadata.get("format") {
        Some(tag) if tag == CHECKPOINT_FORMAT => {}
        other => return Err(ckpt_err(format!("unsupported format tag {other:?}"))),
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, device)?;
        tensors.insert(name, t);
    }
    Ok(Archive { tensors, metadata })
}

/// Scalar value of a rank-0 or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bilinear_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &dev).unwrap();
        let y = upsample_bilinear2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // first row: clamp -> 1, 1.25, 1.75, 2
        assert_eq!(&v[0..4], &[1.0, 1.25, 1.75, 2.0]);
        // second row interpolates 0.75*row0 + 0.25*row1
        assert!((v[4] - 1.5).abs() < 1e-12);
        // constant input stays constant
        let c = Tensor::ones((2, 3, 1, 1), DType::F64, &dev).unwrap();
        let u = upsample_bilinear2x(&c).unwrap();
        assert_eq!(u.dims(), &[2, 3, 2, 2]);
        assert!(u.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn conv_matches_candle_reference() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, hw) in [(3, 1, 7), (3, 2, 8), (3, 2, 7), (1, 1, 5), (5, 2, 9)] {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", 3, 4, k, s, 1.0, &mut rng, DType::F64, &dev).unwrap();
            let x = randn(&mut rng, &[2, 3, hw, hw], 1.0, DType::F64, &dev).unwrap();
            let y = conv.forward(&x).unwrap();
            let r = x
                .conv2d(conv.weight.as_tensor(), k / 2, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.as_tensor().reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(y.dims(), r.dims());
            let diff = (y - r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k{k} s{s} hw{hw}: {diff}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -5.0]], &dev).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::new(&[1.0f64, -2.0], &dev).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&store, &grads).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        // first Adam step moves each coordinate by lr against sign(grad)
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn archive_round_trip_and_format_tag() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = randn(&mut rng, &[2, 3], 1.0, DType::F32, &dev).unwrap();
        let mut meta = HashMap::new();
        meta.insert("note".to_string(), "x".to_string());
        save_archive(&path, &[("t".into(), t.clone())], meta).unwrap();
        let a = load_archive(&path, &dev).unwrap();
        assert_eq!(a.metadata["format"], CHECKPOINT_FORMAT);
        assert_eq!(
            a.tensors["t"].to_vec2::<f32>().unwrap(),
            t.to_vec2::<f32>().unwrap()
        );
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_archive(&path, &dev).is_err());
    }
}
