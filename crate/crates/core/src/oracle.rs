//! Checks with known answers: critic calibration against the closed-form W1 of
//! two Gaussians, gradient-penalty closed forms, and finite-difference checks of
//! the training objectives at double precision.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::critic::{
    critic_objective_vectors, estimate_w1, gradient_penalty_vectors, ConstantCritic, Critic, LinearCritic,
    MlpCritic,
};
use crate::depthreg::{loss_depth_tensor, DepthGenerator};
use crate::error::Result;
use crate::geometry::NUM_KEYPOINTS;
use crate::posenet::{loss_25d_tensor, soft_argmax, LatentHeatmaps25D, PoseTensor};

/// Largest accepted relative error between analytic and central-difference
/// gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl OracleCheck {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = vec![w1_calibration(seed)?];
    out.extend(gradient_penalty_closed_forms(seed)?);
    out.push(fd_critic_objective(seed, 20)?);
    out.push(fd_loss_25d(seed, 20)?);
    out.push(fd_loss_depth(seed, 20)?);
    Ok(out)
}

/// Empirical W1 between two equally sized 1-D samples (mean gap of the sorted
/// values).
pub fn sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "sorted W1 needs equal sample counts");
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
}

/// Trains the critic on N(0,1) vs N(3,1) (4096 samples each) and expects an
/// estimate in [2.7, 3.3].
pub fn w1_calibration(seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4096;
    let mut draw = |mu: f64| -> Vec<f64> {
        let d = Normal::new(mu, 1.0).expect("unit variance");
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    let a = draw(0.0);
    let b = draw(3.0);
    let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.iter().map(|&x| vec![x]).collect() };
    let est = estimate_w1(&rows(&b), &rows(&a), 2000, &mut rng)?;
    let sorted = sorted_w1(&a, &b);
    Ok(OracleCheck::new(
        "w1_calibration",
        (2.7..=3.3).contains(&est),
        format!("critic {est:.4}, sorted samples {sorted:.4}, closed form 3"),
    ))
}

/// Linear critics with gradient norm 1 and 3 and a constant critic give
/// penalties 0, 4 and 1 for any inputs.
pub fn gradient_penalty_closed_forms(seed: u64) -> Result<Vec<OracleCheck>> {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = random_tensor(&mut rng, (16, 4), 2.0, &device)?;
    let xt = random_tensor(&mut rng, (16, 4), 2.0, &device)?;
    let cases: [(&str, Box<dyn Critic>, f64); 3] = [
        ("gp_unit_norm_linear", Box::new(LinearCritic::new(&[0.5, 0.5, 0.5, 0.5], 0.3, DType::F64, &device)?), 0.0),
        ("gp_norm3_linear", Box::new(LinearCritic::new(&[1.8, 0.0, -2.4, 0.0], -1.0, DType::F64, &device)?), 4.0),
        ("gp_constant", Box::new(ConstantCritic::new(0.7)), 1.0),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, critic, want) in cases {
        let gp = gradient_penalty_vectors(critic.as_ref(), &xs, &xt, &mut rng)?.to_scalar::<f64>()?;
        out.push(OracleCheck::new(
            name,
            (gp - want).abs() <= 1e-9,
            format!("penalty {gp:.12}, expected {want}"),
        ));
    }
    Ok(out)
}

/// `|a - b| / max(|b|, 1e-12)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// A scalar objective of some `Var`s, re-evaluated while single coordinates are
/// perturbed.
struct FdProblem<'a> {
    vars: Vec<Var>,
    /// Flat coordinates to check, as `(var, element)`; `None` checks all.
    coords: Option<Vec<(usize, usize)>>,
    eval: Box<dyn Fn() -> Result<Tensor> + 'a>,
}

impl FdProblem<'_> {
    fn coordinates(&self) -> Vec<(usize, usize)> {
        match &self.coords {
            Some(c) => c.clone(),
            None => self
                .vars
                .iter()
                .enumerate()
                .flat_map(|(i, v)| (0..v.elem_count()).map(move |j| (i, j)))
                .collect(),
        }
    }

    /// Relative error between autodiff and central differences over the chosen
    /// coordinates.
    fn relative_error(&self) -> Result<f64> {
        let loss = (self.eval)()?;
        let grads = loss.backward()?;
        let coords = self.coordinates();
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &(vi, ej) in &coords {
            let var = &self.vars[vi];
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f64>()?[ej],
                None => 0.0,
            };
            analytic.push(g);
            let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            let at = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[ej] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
                Ok((self.eval)()?.to_scalar::<f64>()?)
            };
            let up = at(FD_STEP)?;
            let down = at(-FD_STEP)?;
            var.set(&Tensor::from_vec(base, var.shape(), var.device())?)?;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        Ok(relative_error(&analytic, &numeric))
    }
}

fn random_tensor<S: Into<candle_core::Shape>>(rng: &mut ChaCha8Rng, shape: S, scale: f64, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

fn fd_summary(name: &str, errors: &[f64]) -> OracleCheck {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    OracleCheck::new(
        name,
        worst < FD_TOLERANCE && errors.iter().all(|e| e.is_finite()),
        format!("worst relative error {worst:.2e} over {} instances", errors.len()),
    )
}

/// Critic objective `-wd + lambda_gp * gp` against critic parameters and source
/// features; the interpolation draws are replayed for every evaluation.
pub fn fd_critic_objective(seed: u64, instances: usize) -> Result<OracleCheck> {
    let device = Device::Cpu;
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + i as u64));
        let critic = MlpCritic::with_width(5, 8, rng.random(), DType::F64, &device)?;
        let xs = Var::from_tensor(&random_tensor(&mut rng, (4, 5), 1.5, &device)?)?;
        let xt = random_tensor(&mut rng, (4, 5), 1.5, &device)?;
        let interp_seed: u64 = rng.random();
        let mut vars: Vec<Var> = critic.params().iter().map(|(_, v)| v.clone()).collect();
        vars.push(xs.clone());
        let problem = FdProblem {
            vars,
            coords: None,
            eval: Box::new(|| {
                let mut r = ChaCha8Rng::seed_from_u64(interp_seed);
                Ok(critic_objective_vectors(&critic, xs.as_tensor(), &xt, 10.0, &mut r)?.combined)
            }),
        };
        errors.push(problem.relative_error()?);
    }
    Ok(fd_summary("fd_critic_objective", &errors))
}

/// 2.5D loss through the soft-argmax readout, against heatmap logits and depth
/// maps. Ground truth sits at least one unit away from the prediction so no
/// absolute value is near its kink.
pub fn fd_loss_25d(seed: u64, instances: usize) -> Result<OracleCheck> {
    let device = Device::Cpu;
    let (k, h) = (NUM_KEYPOINTS, 4);
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000 + i as u64));
        let logits = Var::from_tensor(&random_tensor(&mut rng, (2, k, h, h), 2.0, &device)?)?;
        let depth = Var::from_tensor(&random_tensor(&mut rng, (2, k, h, h), 1.0, &device)?)?;
        let heat = |l: &Var, d: &Var| LatentHeatmaps25D {
            heat2d: l.as_tensor().clone(),
            depthmaps: d.as_tensor().clone(),
        };
        let pred = soft_argmax(&heat(&logits, &depth), 16)?;
        let mut offset = |t: &Tensor| -> Result<Tensor> {
            let n = t.elem_count();
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    let m = rng.random_range(1.0..3.0);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            Ok((t + Tensor::from_vec(v, t.shape(), &device)?)?)
        };
        let gt = PoseTensor {
            uv: offset(&pred.uv.detach())?,
            z_n: offset(&pred.z_n.detach())?,
        };
        let problem = FdProblem {
            vars: vec![logits.clone(), depth.clone()],
            coords: None,
            eval: Box::new(|| {
                let p = soft_argmax(&heat(&logits, &depth), 16)?;
                loss_25d_tensor(&p, &gt, 0.7)
            }),
        };
        errors.push(problem.relative_error()?);
    }
    Ok(fd_summary("fd_loss_25d", &errors))
}

/// Depth loss of the rendered image against normalized depths and a random
/// subset of generator parameters.
pub fn fd_loss_depth(seed: u64, instances: usize) -> Result<OracleCheck> {
    let device = Device::Cpu;
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3000 + i as u64));
        let gen = DepthGenerator::new(16, 8, rng.random(), DType::F64, &device)?;
        let uv: Vec<f64> = (0..2 * NUM_KEYPOINTS * 2).map(|_| rng.random_range(1.0..15.0)).collect();
        let uv = Tensor::from_vec(uv, (2, NUM_KEYPOINTS, 2), &device)?;
        let z = Var::from_tensor(&random_tensor(&mut rng, (2, NUM_KEYPOINTS), 1.0, &device)?)?;
        let gt: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt = Tensor::from_vec(gt, (2, 1, 8, 8), &device)?;
        let mut vars = vec![z.clone()];
        vars.extend(gen.params().iter().map(|(_, v)| v.clone()));
        let mut coords: Vec<(usize, usize)> = (0..z.elem_count()).map(|j| (0, j)).collect();
        for _ in 0..24 {
            let vi = rng.random_range(1..vars.len());
            coords.push((vi, rng.random_range(0..vars[vi].elem_count())));
        }
        let problem = FdProblem {
            vars,
            coords: Some(coords),
            eval: Box::new(|| loss_depth_tensor(&gen.render(&uv, z.as_tensor())?, &gt)),
        };
        errors.push(problem.relative_error()?);
    }
    Ok(fd_summary("fd_loss_depth", &errors))
}
