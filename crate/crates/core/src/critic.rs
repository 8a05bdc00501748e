//! Wasserstein critic: dual-form distance estimate, gradient penalty at random
//! interpolates, and the critic objective.
//!
//! Sign convention: the critic *maximizes* the distance estimate, i.e. it
//! minimizes `-wd + lambda_gp * gp`. The distance estimate is
//! `mean_s f(pool(s)) - mean_t f(pool(t))`.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{invalid_config, invalid_input, Result};
use crate::nn::{leaky_relu, leaky_relu_slope, scalar, Adam, Linear, ParamStore};
use crate::simweight::FeatureMap;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const HIDDEN_WIDTH: usize = 128;

/// Added under the square root of the gradient norm so that a zero gradient has a
/// finite derivative.
const NORM_EPS: f64 = 1e-24;

/// A scalar scoring function on `(B, n)` inputs whose input gradient can be
/// written as a differentiable expression of its parameters.
pub trait Critic {
    /// Scores, shape `(B,)`.
    fn score(&self, x: &Tensor) -> Result<Tensor>;

    /// `d score_b / d x_b` for every row, shape `(B, n)`.
    fn input_gradient(&self, x: &Tensor) -> Result<Tensor>;

    fn params(&self) -> &ParamStore;
}

/// Two hidden layers with leaky-rectifier activations, then a scalar.
#[derive(Debug, Clone)]
pub struct MlpCritic {
    store: ParamStore,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl MlpCritic {
    pub fn new(input_dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_width(input_dim, HIDDEN_WIDTH, seed, dtype, device)
    }

    pub fn with_width(
        input_dim: usize,
        width: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if input_dim == 0 || width == 0 {
            return Err(invalid_config("critic dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", input_dim, width, 1.0, &mut rng, dtype, device)?;
        let l2 = Linear::new(&mut store, "l2", width, width, 1.0, &mut rng, dtype, device)?;
        let out = Linear::new(&mut store, "out", width, 1, 0.5, &mut rng, dtype, device)?;
        Ok(Self { store, l1, l2, out })
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }
}

impl Critic for MlpCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let h1 = leaky_relu(&self.l1.forward(x)?, LEAKY_SLOPE)?;
        let h2 = leaky_relu(&self.l2.forward(&h1)?, LEAKY_SLOPE)?;
        Ok(self.out.forward(&h2)?.squeeze(D::Minus1)?)
    }

    fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        // grad = W1^T diag(s1) W2^T diag(s2) w3 per row, with s the activation slopes
        let a1 = self.l1.forward(x)?;
        let s1 = leaky_relu_slope(&a1, LEAKY_SLOPE)?;
        let a2 = self.l2.forward(&leaky_relu(&a1, LEAKY_SLOPE)?)?;
        let s2 = leaky_relu_slope(&a2, LEAKY_SLOPE)?;
        let w3 = self.out.weight().as_tensor(); // (1, width)
        let g2 = s2.broadcast_mul(w3)?; // (B, width)
        let g1 = g2.matmul(self.l2.weight().as_tensor())?.mul(&s1)?; // (B, width)
        Ok(g1.matmul(self.l1.weight().as_tensor())?)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// `f(x) = w . x + b`.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    store: ParamStore,
    layer: Linear,
}

impl LinearCritic {
    pub fn new(weights: &[f64], bias: f64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new();
        let w = store.insert(
            "weight",
            Tensor::from_slice(weights, (1, weights.len()), device)?.to_dtype(dtype)?,
        )?;
        let b = store.insert("bias", Tensor::new(&[bias], device)?.to_dtype(dtype)?)?;
        Ok(Self {
            store,
            layer: Linear::from_vars(w, b),
        })
    }
}

impl Critic for LinearCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.layer.forward(x)?.squeeze(D::Minus1)?)
    }

    fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _) = x.dims2()?;
        Ok(self.layer.weight().as_tensor().broadcast_as(x.shape())?.contiguous()?.reshape((b, ()))?)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// `f(x) = c` everywhere.
#[derive(Debug, Clone)]
pub struct ConstantCritic {
    store: ParamStore,
    value: f64,
}

impl ConstantCritic {
    pub fn new(value: f64) -> Self {
        Self {
            store: ParamStore::new(),
            value,
        }
    }
}

impl Critic for ConstantCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _) = x.dims2()?;
        Ok(Tensor::full(self.value, b, x.device())?.to_dtype(x.dtype())?)
    }

    fn input_gradient(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.zeros_like()?)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Global average over H and W: `(B, C, H, W)` to `(B, C)`.
pub fn pool(feat: &FeatureMap) -> Result<Tensor> {
    Ok(feat.values().mean(D::Minus1)?.mean(D::Minus1)?)
}

fn check_vectors(a: &Tensor, b: &Tensor) -> Result<()> {
    let (na, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if na == 0 || nb == 0 {
        return Err(invalid_input("critic needs non-empty batches"));
    }
    if da != db {
        return Err(invalid_input(format!("feature dimensions differ: {da} vs {db}")));
    }
    Ok(())
}

/// Distance estimate on already-pooled `(B, n)` vectors.
pub fn wd_loss_vectors(fd: &dyn Critic, xs: &Tensor, xt: &Tensor) -> Result<Tensor> {
    check_vectors(xs, xt)?;
    Ok((fd.score(xs)?.mean_all()? - fd.score(xt)?.mean_all()?)?)
}

/// `mean_s f(pool(feat_s)) - mean_t f(pool(feat_t))`, differentiable in both the
/// critic parameters and the features.
pub fn wd_loss(fd: &dyn Critic, feat_s: &FeatureMap, feat_t: &FeatureMap) -> Result<Tensor> {
    wd_loss_vectors(fd, &pool(feat_s)?, &pool(feat_t)?)
}

/// Gradient penalty on pooled `(B, n)` vectors paired row by row.
pub fn gradient_penalty_vectors(
    fd: &dyn Critic,
    xs: &Tensor,
    xt: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    check_vectors(xs, xt)?;
    let (bs, _) = xs.dims2()?;
    let (bt, _) = xt.dims2()?;
    if bs != bt {
        return Err(invalid_input(format!(
            "gradient penalty pairs samples one to one, got batches {bs} and {bt}"
        )));
    }
    let t: Vec<f64> = (0..bs).map(|_| rng.random::<f64>()).collect();
    let t = Tensor::from_vec(t, (bs, 1), xs.device())?.to_dtype(xs.dtype())?;
    let one_minus = t.affine(-1.0, 1.0)?;
    let xm = (xs.broadcast_mul(&t)? + xt.broadcast_mul(&one_minus)?)?;
    let g = fd.input_gradient(&xm)?;
    let norm = (g.sqr()?.sum(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

/// Mean over pairs of `(|grad f(x_m)| - 1)^2` at `x_m = t x_s + (1 - t) x_t`,
/// `t ~ U(0, 1)` per pair.
pub fn gradient_penalty(
    fd: &dyn Critic,
    feat_s: &FeatureMap,
    feat_t: &FeatureMap,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    gradient_penalty_vectors(fd, &pool(feat_s)?, &pool(feat_t)?, rng)
}

#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    pub wd: Tensor,
    pub gp: Tensor,
    /// `-wd + lambda_gp * gp`, minimized by the critic optimizer.
    pub combined: Tensor,
}

impl AdversarialLosses {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        Ok((scalar(&self.wd)?, scalar(&self.gp)?, scalar(&self.combined)?))
    }
}

pub fn critic_objective_vectors(
    fd: &dyn Critic,
    xs: &Tensor,
    xt: &Tensor,
    lambda_gp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialLosses> {
    if !(lambda_gp >= 0.0) {
        return Err(invalid_config(format!("lambda_gp must be >= 0, got {lambda_gp}")));
    }
    let wd = wd_loss_vectors(fd, xs, xt)?;
    let gp = gradient_penalty_vectors(fd, xs, xt, rng)?;
    let combined = ((&gp * lambda_gp)? - &wd)?;
    Ok(AdversarialLosses { wd, gp, combined })
}

pub fn critic_objective(
    fd: &dyn Critic,
    feat_s: &FeatureMap,
    feat_t: &FeatureMap,
    lambda_gp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialLosses> {
    critic_objective_vectors(fd, &pool(feat_s)?, &pool(feat_t)?, lambda_gp, rng)
}

/// Training budget for [`estimate_w1`]. The penalty weight is higher than the
/// training default: with a soft Lipschitz penalty the optimal critic slope on
/// two shifted distributions is about `1 + W1 / (2 lambda_gp)`, so calibration
/// needs a stiff penalty.
#[derive(Debug, Clone, Copy)]
pub struct W1EstimatorConfig {
    pub batch: usize,
    pub lr: f64,
    pub lambda_gp: f64,
    pub width: usize,
}

impl Default for W1EstimatorConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            lr: 1e-3,
            lambda_gp: 100.0,
            width: HIDDEN_WIDTH,
        }
    }
}

/// Trains a fresh critic to separate two sample sets and returns its final
/// distance estimate over the full sets.
pub fn estimate_w1(
    samples_a: &[Vec<f64>],
    samples_b: &[Vec<f64>],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    estimate_w1_with(samples_a, samples_b, steps, W1EstimatorConfig::default(), rng)
}

pub fn estimate_w1_with(
    samples_a: &[Vec<f64>],
    samples_b: &[Vec<f64>],
    steps: usize,
    cfg: W1EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if steps == 0 {
        return Err(invalid_config("estimate_w1 needs at least one training step"));
    }
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(invalid_input("estimate_w1 needs non-empty sample sets"));
    }
    let dim = samples_a[0].len();
    if dim == 0 || samples_a.iter().chain(samples_b).any(|s| s.len() != dim) {
        return Err(invalid_input("all samples must share one positive dimension"));
    }
    let device = Device::Cpu;
    let to_tensor = |set: &[Vec<f64>]| -> Result<Tensor> {
        let flat: Vec<f32> = set.iter().flatten().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(flat, (set.len(), dim), &device)?)
    };
    let all_a = to_tensor(samples_a)?;
    let all_b = to_tensor(samples_b)?;
    let critic = MlpCritic::with_width(dim, cfg.width, rng.random(), DType::F32, &device)?;
    let mut opt = Adam::new(critic.params(), cfg.lr, 0.5, 0.9)?;
    let batch = cfg.batch.min(samples_a.len()).min(samples_b.len()).max(1);
    for _ in 0..steps {
        let ia: Vec<u32> = (0..batch)
            .map(|_| rng.random_range(0..samples_a.len()) as u32)
            .collect();
        let ib: Vec<u32> = (0..batch)
            .map(|_| rng.random_range(0..samples_b.len()) as u32)
            .collect();
        let xa = all_a.index_select(&Tensor::new(ia.as_slice(), &device)?, 0)?;
        let xb = all_b.index_select(&Tensor::new(ib.as_slice(), &device)?, 0)?;
        let losses = critic_objective_vectors(&critic, &xa, &xb, cfg.lambda_gp, rng)?;
        let grads = losses.combined.backward()?;
        opt.step(critic.params(), &grads)?;
    }
    scalar(&wd_loss_vectors(&critic, &all_a, &all_b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn vecs(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), n), &dev()).unwrap()
    }

    #[test]
    fn linear_critic_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = vecs(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let xt = vecs(&[&[0.0, 0.5], &[2.0, 2.0]]);
        let unit = LinearCritic::new(&[0.6, 0.8], 0.3, DType::F64, &dev()).unwrap();
        let gp = scalar(&gradient_penalty_vectors(&unit, &xs, &xt, &mut rng).unwrap()).unwrap();
        assert!(gp.abs() < 1e-9);
        let three = LinearCritic::new(&[1.8, 2.4], 0.0, DType::F64, &dev()).unwrap();
        let gp = scalar(&gradient_penalty_vectors(&three, &xs, &xt, &mut rng).unwrap()).unwrap();
        assert!((gp - 4.0).abs() < 1e-9);
        let constant = ConstantCritic::new(2.5);
        let gp = scalar(&gradient_penalty_vectors(&constant, &xs, &xt, &mut rng).unwrap()).unwrap();
        assert!((gp - 1.0).abs() < 1e-9);
        // wd = w . (mean_s - mean_t) = 0.6*(2 - 1) + 0.8*(0.5 - 1.25)
        let wd = scalar(&wd_loss_vectors(&unit, &xs, &xt).unwrap()).unwrap();
        assert!((wd - (0.6 * 1.0 + 0.8 * -0.75)).abs() < 1e-12);
    }

    #[test]
    fn objective_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = vecs(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let xt = vecs(&[&[0.0, 0.5], &[2.0, 2.0]]);
        let critic = MlpCritic::new(2, 1, DType::F64, &dev()).unwrap();
        let l = critic_objective_vectors(&critic, &xs, &xt, 0.0, &mut rng).unwrap();
        let (wd, _, combined) = l.values().unwrap();
        assert_eq!(combined, -wd);
        let l = critic_objective_vectors(&critic, &xs, &xs, 10.0, &mut rng).unwrap();
        let (wd, gp, combined) = l.values().unwrap();
        assert_eq!(wd, 0.0);
        assert!(gp >= 0.0 && (combined - 10.0 * gp).abs() < 1e-12);
        assert!(critic_objective_vectors(&critic, &xs, &xt, -1.0, &mut rng).is_err());
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let critic = MlpCritic::new(3, 5, DType::F64, &dev()).unwrap();
        let x = vecs(&[&[0.3, -0.7, 1.1], &[-0.2, 0.4, 0.9]]);
        let g = critic.input_gradient(&x).unwrap().to_vec2::<f64>().unwrap();
        let base = x.to_vec2::<f64>().unwrap();
        let h = 1e-6;
        for b in 0..2 {
            for i in 0..3 {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[b][i] += h;
                minus[b][i] -= h;
                let fp = critic.score(&vecs(&[&plus[0], &plus[1]])).unwrap().to_vec1::<f64>().unwrap()[b];
                let fm = critic.score(&vecs(&[&minus[0], &minus[1]])).unwrap().to_vec1::<f64>().unwrap()[b];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[b][i]).abs() < 1e-7, "{fd} vs {}", g[b][i]);
            }
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = ConstantCritic::new(0.0);
        let a = vecs(&[&[1.0], &[2.0]]);
        let b = vecs(&[&[1.0]]);
        assert!(gradient_penalty_vectors(&critic, &a, &b, &mut rng).is_err());
        let empty = Tensor::zeros((0, 1), DType::F64, &dev()).unwrap();
        assert!(wd_loss_vectors(&critic, &empty, &b).is_err());
        assert!(estimate_w1(&[vec![0.0]], &[vec![1.0]], 0, &mut rng).is_err());
        assert!(estimate_w1(&[], &[vec![1.0]], 10, &mut rng).is_err());
    }
}
