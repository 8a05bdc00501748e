//! Evaluation under the known-root-depth-and-scale protocol: 3D end-point error,
//! PCK curves and their normalized area, plus a PCA projection of pooled latent
//! features for domain-overlap inspection.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::critic::pool;
use crate::error::{invalid_input, io_err, AwhError, Result};
use crate::geometry::{lift_to_3d, Keypoints3D, NormalizationSpec, Pose25D, NUM_KEYPOINTS};
use crate::posenet::{image_batch, PoseNet};
use crate::simweight::Domain;
use crate::toyhands::Sample;

/// Evenly spaced PCK thresholds in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

pub const PCK_20_50: PckRange = PckRange {
    lo: 20.0,
    hi: 50.0,
    step: 1.0,
};

pub const PCK_0_30: PckRange = PckRange {
    lo: 0.0,
    hi: 30.0,
    step: 1.0,
};

impl PckRange {
    pub fn thresholds(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

impl std::str::FromStr for PckRange {
    type Err = AwhError;

    /// `"20-50"` or `"0-30"` (step 1 mm), or `"lo-hi:step"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid_input(format!("bad PCK range `{s}`, expected lo-hi or lo-hi:step"));
        let (span, step) = match s.split_once(':') {
            Some((a, b)) => (a, b.parse::<f64>().map_err(|_| bad())?),
            None => (s, 1.0),
        };
        let (lo, hi) = span.split_once('-').ok_or_else(bad)?;
        let r = PckRange {
            lo: lo.trim().parse().map_err(|_| bad())?,
            hi: hi.trim().parse().map_err(|_| bad())?,
            step,
        };
        if !(r.step > 0.0 && r.hi > r.lo && r.lo >= 0.0) {
            return Err(bad());
        }
        Ok(r)
    }
}

/// Per-joint Euclidean errors, one row of `NUM_KEYPOINTS` per sample.
pub fn joint_errors(pred: &[Keypoints3D], gt: &[Keypoints3D]) -> Result<Vec<[f64; NUM_KEYPOINTS]>> {
    if pred.len() != gt.len() {
        return Err(invalid_input(format!(
            "{} predictions for {} ground-truth poses",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut e = [0.0; NUM_KEYPOINTS];
            for (k, ek) in e.iter_mut().enumerate() {
                let d: f64 = (0..3).map(|a| (p.0[k][a] - g.0[k][a]).powi(2)).sum();
                *ek = d.sqrt();
            }
            e
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epe {
    pub mean_epe_mm: f64,
    pub per_joint_mm: Vec<f64>,
}

/// Mean end-point error over samples and joints, and per joint.
pub fn epe(pred: &[Keypoints3D], gt: &[Keypoints3D]) -> Result<Epe> {
    let rows = joint_errors(pred, gt)?;
    if rows.is_empty() {
        return Err(invalid_input("no poses to evaluate"));
    }
    Ok(epe_from_rows(&rows))
}

fn epe_from_rows(rows: &[[f64; NUM_KEYPOINTS]]) -> Epe {
    let n = rows.len() as f64;
    let per_joint_mm: Vec<f64> = (0..NUM_KEYPOINTS)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    let mean_epe_mm = rows.iter().flatten().sum::<f64>() / (n * NUM_KEYPOINTS as f64);
    Epe {
        mean_epe_mm,
        per_joint_mm,
    }
}

/// Fraction of errors at or below each threshold.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(invalid_input("PCK needs at least one error"));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid_input("PCK thresholds must be non-empty and strictly increasing"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
        .collect())
}

/// Trapezoidal area under a PCK curve divided by its threshold span.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(invalid_input("AUC needs at least two curve points"));
    }
    let span = curve[curve.len() - 1].0 - curve[0].0;
    if !(span > 0.0) {
        return Err(invalid_input("AUC needs increasing thresholds"));
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / span)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_epe_mm: f64,
    pub per_joint_epe_mm: Vec<f64>,
    pub pck: Vec<(f64, f64)>,
    /// Area under `pck`.
    pub auc: f64,
    pub auc_0_30: f64,
    /// Samples whose lifted pose had a joint at non-positive depth.
    pub invalid_lifts: usize,
}

impl EvalReport {
    pub fn from_errors(rows: &[[f64; NUM_KEYPOINTS]], range: PckRange, invalid_lifts: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid_input("no poses to evaluate"));
        }
        let e = epe_from_rows(rows);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let pck = pck_curve(&flat, &range.thresholds())?;
        let auc_main = auc(&pck)?;
        let auc_0_30 = auc(&pck_curve(&flat, &PCK_0_30.thresholds())?)?;
        Ok(Self {
            samples: rows.len(),
            mean_epe_mm: e.mean_epe_mm,
            per_joint_epe_mm: e.per_joint_mm,
            pck,
            auc: auc_main,
            auc_0_30,
            invalid_lifts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid_input(format!("bad report: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn pck_csv(&self) -> String {
        let mut s = String::from("threshold_mm,fraction\n");
        for (t, f) in &self.pck {
            writeln!(s, "{t},{f}").expect("writing to a string");
        }
        s
    }

    pub fn write_pck_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.pck_csv()).map_err(io_err(path))
    }
}

/// Parses a `threshold_mm,fraction` file.
pub fn read_pck_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_pck_csv(&text)
}

pub fn parse_pck_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("threshold_mm,fraction") {
        return Err(invalid_input("pck.csv must start with `threshold_mm,fraction`"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || invalid_input(format!("pck.csv line {}: `{l}`", i + 2));
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// 2.5D predictions for every sample, in batches.
pub fn predict(net: &PoseNet, samples: &[Sample], batch: usize) -> Result<Vec<Pose25D>> {
    let (dtype, device) = net_dtype_device(net);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<&[u8]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let x = image_batch(&imgs, net.config().image_size, dtype, &device)?;
        let (_, r) = net.forward(&x, chunk[0].domain)?;
        out.extend(r.pose.to_poses()?);
    }
    Ok(out)
}

fn net_dtype_device(net: &PoseNet) -> (DType, candle_core::Device) {
    let (_, v) = net.params().iter().next().expect("network has parameters");
    (v.dtype(), v.device().clone())
}

/// Lifts every prediction with the sample's true root depth and bone length and
/// scores it against the sample's 3D keypoints.
pub fn evaluate(net: &PoseNet, samples: &[Sample], spec: &NormalizationSpec, range: PckRange) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid_input("no samples to evaluate"));
    }
    let preds = predict(net, samples, 32)?;
    evaluate_poses(&preds, samples, spec, range)
}

pub fn evaluate_poses(
    preds: &[Pose25D],
    samples: &[Sample],
    spec: &NormalizationSpec,
    range: PckRange,
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(invalid_input("one prediction per sample required"));
    }
    let mut lifted = Vec::with_capacity(samples.len());
    let mut invalid = 0;
    for (p, s) in preds.iter().zip(samples) {
        let root_z = s.kp3d.0[spec.root_index][2];
        let lift = lift_to_3d(p, &s.intrinsics, root_z, spec.bone_length(&s.kp3d), spec)?;
        if !lift.is_valid() {
            invalid += 1;
        }
        lifted.push(lift.keypoints);
    }
    let gt: Vec<Keypoints3D> = samples.iter().map(|s| s.kp3d).collect();
    EvalReport::from_errors(&joint_errors(&lifted, &gt)?, range, invalid)
}

/// Projection of rows onto their first two principal axes (mean-centered). Axis
/// signs are fixed so that each axis's largest-magnitude loading is positive.
/// Also returns the variance along each axis.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(invalid_input("PCA needs a non-empty matrix with equal-length rows"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for slot in 0..2 {
        let Some(&j) = order.get(slot) else {
            axes.push(nalgebra::DVector::zeros(d));
            continue;
        };
        let mut v = eig.eigenvectors.column(j).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        variances[slot] = eig.eigenvalues[j].max(0.0);
        axes.push(v);
    }
    let points = (0..n)
        .map(|i| {
            let r = centered.row(i);
            [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())]
        })
        .collect();
    Ok((points, variances))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub domain: Domain,
}

/// Pooled encoder features of up to `n_samples` samples, half from each domain,
/// projected to 2D. Uses every available sample (with a warning) when either
/// domain has fewer than `n_samples / 2`.
pub fn project_features(
    net: &PoseNet,
    source: &[Sample],
    target: &[Sample],
    n_samples: usize,
) -> Result<Vec<ScatterPoint>> {
    let half = n_samples / 2;
    let (ns, nt) = (source.len().min(half), target.len().min(n_samples - half));
    if ns + nt < n_samples {
        log::warn!("requested {n_samples} samples, only {} available", ns + nt);
    }
    let mut rows = Vec::with_capacity(ns + nt);
    let mut domains = Vec::with_capacity(ns + nt);
    for (set, count) in [(source, ns), (target, nt)] {
        for chunk in set[..count].chunks(32) {
            let feats = pooled_features(net, chunk)?;
            domains.extend(chunk.iter().map(|s| s.domain));
            rows.extend(feats);
        }
    }
    if rows.is_empty() {
        return Err(invalid_input("no samples to project"));
    }
    let (points, _) = pca_2d(&rows)?;
    Ok(points
        .into_iter()
        .zip(domains)
        .map(|([x, y], domain)| ScatterPoint { x, y, domain })
        .collect())
}

/// Global-average-pooled latent features, one row per sample.
pub fn pooled_features(net: &PoseNet, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let (dtype, device) = net_dtype_device(net);
    let imgs: Vec<&[u8]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let x = image_batch(&imgs, net.config().image_size, dtype, &device)?;
    let z = net.encode(&x, samples.first().map_or(Domain::Source, |s| s.domain))?;
    let p: Tensor = pool(&z)?;
    Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("x,y,domain\n");
    for p in points {
        writeln!(s, "{},{},{}", p.x, p.y, p.domain).expect("writing to a string");
    }
    s
}

pub fn write_scatter_csv(points: &[ScatterPoint], path: &Path) -> Result<()> {
    std::fs::write(path, scatter_csv(points)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pck_and_auc_cases() {
        assert_eq!(pck_curve(&[10.0, 30.0], &[20.0, 40.0]).unwrap(), vec![(20.0, 0.5), (40.0, 1.0)]);
        let ones = pck_curve(&[0.0; 5], &PCK_20_50.thresholds()).unwrap();
        assert!(ones.iter().all(|&(_, f)| f == 1.0));
        assert_eq!(auc(&ones).unwrap(), 1.0);
        assert_eq!(auc(&[(0.0, 0.5), (10.0, 0.5), (30.0, 0.5)]).unwrap(), 0.5);
        assert_eq!(auc(&[(20.0, 0.0), (50.0, 1.0)]).unwrap(), 0.5);
        assert!(auc(&[(20.0, 1.0)]).is_err());
        assert!(pck_curve(&[], &[1.0]).is_err());
        assert!(pck_curve(&[1.0], &[2.0, 1.0]).is_err());
        assert_eq!(PCK_20_50.thresholds().len(), 31);
        assert_eq!("0-30".parse::<PckRange>().unwrap(), PCK_0_30);
        assert!("30-0".parse::<PckRange>().is_err());
    }

    #[test]
    fn epe_arithmetic() {
        let gt = Keypoints3D([[0.0, 0.0, 500.0]; NUM_KEYPOINTS]);
        let mut p = gt;
        p.0[7] = [3.0, 4.0, 500.0];
        let e = epe(&[p], &[gt]).unwrap();
        assert_eq!(e.mean_epe_mm, 5.0 / 21.0);
        assert_eq!(e.per_joint_mm[7], 5.0);
        assert_eq!(epe(&[gt], &[gt]).unwrap().mean_epe_mm, 0.0);
        assert!(epe(&[gt], &[]).is_err());
    }

    #[test]
    fn report_round_trips() {
        let rows = vec![[1.5; NUM_KEYPOINTS], [33.3; NUM_KEYPOINTS], [0.1 + 0.2; NUM_KEYPOINTS]];
        let r = EvalReport::from_errors(&rows, PCK_20_50, 1).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(parse_pck_csv(&r.pck_csv()).unwrap(), r.pck);
    }

    #[test]
    fn pca_orders_axes_and_treats_duplicates_identically() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64;
                vec![3.0 * t.sin(), 0.5 * t.cos(), 0.1 * t]
            })
            .collect();
        let (pts, var) = pca_2d(&rows).unwrap();
        assert!(var[0] >= var[1]);
        let v0 = pts.iter().map(|p| p[0] * p[0]).sum::<f64>();
        let v1 = pts.iter().map(|p| p[1] * p[1]).sum::<f64>();
        assert!(v0 >= v1);
        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let (pts, _) = pca_2d(&doubled).unwrap();
        assert_eq!(pts[..50], pts[50..]);
    }
}
