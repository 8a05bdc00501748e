//! Hand keypoint geometry: pinhole projection, the root-relative scale-normalized
//! 2.5D representation, and its exact inverse under known root depth and scale.
//!
//! Keypoint order is fixed: index 0 is the palm root, then thumb, index, middle,
//! ring and pinky, each listed base to tip (4 joints per finger).

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

/// Number of hand keypoints.
pub const NUM_KEYPOINTS: usize = 21;

/// Bone lengths below this (mm) cannot define a normalization scale.
pub const MIN_BONE_LENGTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(invalid_input(format!(
                "camera focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Intrinsics for the same camera sampled on a grid `factor` times coarser,
    /// keeping pixel centers at integer coordinates.
    pub fn downscaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx / factor,
            fy: self.fy / factor,
            cx: (self.cx + 0.5) / factor - 0.5,
            cy: (self.cy + 0.5) / factor - 0.5,
        }
    }
}

/// 21 camera-space keypoints in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3D(pub [[f64; 3]; NUM_KEYPOINTS]);

impl Keypoints3D {
    pub fn points(&self) -> &[[f64; 3]; NUM_KEYPOINTS] {
        &self.0
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut out = self.0;
        for p in out.iter_mut() {
            for a in 0..3 {
                p[a] += offset[a];
            }
        }
        Keypoints3D(out)
    }

    /// Scales every keypoint about `center` by `s`.
    pub fn scaled_about(&self, center: [f64; 3], s: f64) -> Self {
        let mut out = self.0;
        for p in out.iter_mut() {
            for a in 0..3 {
                p[a] = s * (p[a] - center[a]) + center[a];
            }
        }
        Keypoints3D(out)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        dist3(&self.0[i], &self.0[j])
    }
}

pub(crate) fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Which keypoint is the root and which bone fixes the scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub root_index: usize,
    pub bone: (usize, usize),
    pub constant_c: f64,
}

/// Middle-finger metacarpal: palm root to the middle MCP joint.
pub const MIDDLE_METACARPAL: (usize, usize) = (0, 9);

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            root_index: 0,
            bone: MIDDLE_METACARPAL,
            constant_c: 1.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        let (k1, k2) = self.bone;
        if self.root_index >= NUM_KEYPOINTS || k1 >= NUM_KEYPOINTS || k2 >= NUM_KEYPOINTS {
            return Err(invalid_input("normalization indices out of range"));
        }
        if k1 == k2 {
            return Err(invalid_input("normalization bone joints must differ"));
        }
        if !(self.constant_c > 0.0 && self.constant_c.is_finite()) {
            return Err(invalid_input("normalization constant must be positive"));
        }
        Ok(())
    }

    /// Length of the normalizing bone in `p`, in mm.
    pub fn bone_length(&self, p: &Keypoints3D) -> f64 {
        p.distance(self.bone.0, self.bone.1)
    }
}

/// Per-keypoint pixel coordinates plus normalized root-relative depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose25D {
    pub uv: [[f64; 2]; NUM_KEYPOINTS],
    pub z_n: [f64; NUM_KEYPOINTS],
}

/// Root-relative keypoints rescaled so the normalizing bone has length `constant_c`.
pub fn normalize_root_relative(p: &Keypoints3D, spec: &NormalizationSpec) -> Result<Keypoints3D> {
    spec.validate()?;
    let d = spec.bone_length(p);
    if !(d >= MIN_BONE_LENGTH) {
        return Err(invalid_input(format!(
            "degenerate normalization bone ({} mm)",
            d
        )));
    }
    let scale = spec.constant_c / d;
    let root = p.0[spec.root_index];
    let mut out = [[0.0; 3]; NUM_KEYPOINTS];
    for (o, q) in out.iter_mut().zip(p.0.iter()) {
        for a in 0..3 {
            o[a] = scale * (q[a] - root[a]);
        }
    }
    Ok(Keypoints3D(out))
}

/// Pinhole projection of one camera-space point.
pub fn project_point(q: &[f64; 3], cam: &CameraIntrinsics) -> Result<[f64; 2]> {
    if !(q[2] > 0.0) {
        return Err(invalid_input(format!(
            "point behind the camera (Z = {})",
            q[2]
        )));
    }
    Ok([cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy])
}

pub fn project(p: &Keypoints3D, cam: &CameraIntrinsics) -> Result<[[f64; 2]; NUM_KEYPOINTS]> {
    cam.validate()?;
    let mut uv = [[0.0; 2]; NUM_KEYPOINTS];
    for (o, q) in uv.iter_mut().zip(p.0.iter()) {
        *o = project_point(q, cam)?;
    }
    Ok(uv)
}

pub fn to_pose25d(
    p: &Keypoints3D,
    cam: &CameraIntrinsics,
    spec: &NormalizationSpec,
) -> Result<Pose25D> {
    let uv = project(p, cam)?;
    let n = normalize_root_relative(p, spec)?;
    let mut z_n = [0.0; NUM_KEYPOINTS];
    for (z, q) in z_n.iter_mut().zip(n.0.iter()) {
        *z = q[2];
    }
    Ok(Pose25D { uv, z_n })
}

/// Result of back-projecting a 2.5D pose. Joints whose recovered depth is not
/// positive are listed in `invalid_joints`; their coordinates are still filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Lift {
    pub keypoints: Keypoints3D,
    pub invalid_joints: Vec<usize>,
}

impl Lift {
    pub fn is_valid(&self) -> bool {
        self.invalid_joints.is_empty()
    }
}

/// Recovers camera-space keypoints from a 2.5D pose given the true root depth and
/// the true length of the normalizing bone.
pub fn lift_to_3d(
    pose: &Pose25D,
    cam: &CameraIntrinsics,
    root_z: f64,
    bone_length_d: f64,
    spec: &NormalizationSpec,
) -> Result<Lift> {
    cam.validate()?;
    spec.validate()?;
    if !(root_z > 0.0) {
        return Err(invalid_input(format!("root depth must be positive, got {root_z}")));
    }
    if !(bone_length_d > 0.0) {
        return Err(invalid_input(format!(
            "bone length must be positive, got {bone_length_d}"
        )));
    }
    let depth_scale = bone_length_d / spec.constant_c;
    let mut out = [[0.0; 3]; NUM_KEYPOINTS];
    let mut invalid_joints = Vec::new();
    for k in 0..NUM_KEYPOINTS {
        let z = root_z + depth_scale * pose.z_n[k];
        if !(z > 0.0) {
            invalid_joints.push(k);
        }
        let [u, v] = pose.uv[k];
        out[k] = [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z];
    }
    Ok(Lift {
        keypoints: Keypoints3D(out),
        invalid_joints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_pose() -> Keypoints3D {
        let mut pts = [[0.0, 0.0, 500.0]; NUM_KEYPOINTS];
        pts[9] = [0.0, 30.0, 500.0];
        pts[5] = [10.0, 20.0, 530.0];
        Keypoints3D(pts)
    }

    #[test]
    fn normalization_hand_example() {
        let n = normalize_root_relative(&example_pose(), &NormalizationSpec::default()).unwrap();
        // (10,20,30)/30
        let got = n.0[5];
        let want = [1.0 / 3.0, 2.0 / 3.0, 1.0];
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-12, "{got:?}");
        }
        assert_eq!(n.0[0], [0.0, 0.0, 0.0]);
        assert!((n.distance(0, 9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bone_rejected() {
        let p = Keypoints3D([[1.0, 2.0, 500.0]; NUM_KEYPOINTS]);
        assert!(normalize_root_relative(&p, &NormalizationSpec::default()).is_err());
    }

    #[test]
    fn bad_spec_rejected() {
        let spec = NormalizationSpec {
            bone: (3, 3),
            ..Default::default()
        };
        assert!(normalize_root_relative(&example_pose(), &spec).is_err());
        let spec = NormalizationSpec {
            root_index: 21,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn projection_cases() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 128.0, 128.0).unwrap();
        assert_eq!(project_point(&[0.0, 0.0, 731.0], &cam).unwrap(), [128.0, 128.0]);
        assert_eq!(project_point(&[100.0, 0.0, 500.0], &cam).unwrap(), [228.0, 128.0]);
        let far = project_point(&[100.0, 0.0, 1000.0], &cam).unwrap();
        assert_eq!(far[0] - cam.cx, 50.0);
        assert!(project_point(&[0.0, 0.0, 0.0], &cam).is_err());
        assert!(project_point(&[0.0, 0.0, -5.0], &cam).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose25d_composes_projection_and_normalization() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 128.0, 128.0).unwrap();
        let spec = NormalizationSpec::default();
        let p = example_pose();
        let pose = to_pose25d(&p, &cam, &spec).unwrap();
        assert_eq!(pose.z_n[0], 0.0);
        assert!((pose.z_n[5] - 1.0).abs() < 1e-12);
        // (10/530*500+128, 20/530*500+128)
        assert!((pose.uv[5][0] - (5000.0 / 530.0 + 128.0)).abs() < 1e-12);
        assert!((pose.uv[5][1] - (10000.0 / 530.0 + 128.0)).abs() < 1e-12);
        let n = normalize_root_relative(&p, &spec).unwrap();
        for k in 0..NUM_KEYPOINTS {
            assert_eq!(pose.z_n[k], n.0[k][2]);
        }
    }

    #[test]
    fn lift_inverts_pose25d() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 128.0, 128.0).unwrap();
        let spec = NormalizationSpec::default();
        let p = example_pose();
        let pose = to_pose25d(&p, &cam, &spec).unwrap();
        let lift = lift_to_3d(&pose, &cam, 500.0, 30.0, &spec).unwrap();
        assert!(lift.is_valid());
        assert_eq!(lift.keypoints.0[0][2], 500.0);
        for k in 0..NUM_KEYPOINTS {
            for a in 0..3 {
                assert!((lift.keypoints.0[k][a] - p.0[k][a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn implausible_lift_is_flagged() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 128.0, 128.0).unwrap();
        let spec = NormalizationSpec::default();
        let mut pose = to_pose25d(&example_pose(), &cam, &spec).unwrap();
        pose.z_n[7] = -100.0;
        let lift = lift_to_3d(&pose, &cam, 500.0, 30.0, &spec).unwrap();
        assert_eq!(lift.invalid_joints, vec![7]);
        assert!(lift_to_3d(&pose, &cam, 0.0, 30.0, &spec).is_err());
        assert!(lift_to_3d(&pose, &cam, 500.0, -1.0, &spec).is_err());
    }

    #[test]
    fn downscaled_intrinsics_keep_pixel_centers() {
        let cam = CameraIntrinsics::new(160.0, 160.0, 63.5, 63.5).unwrap();
        let d = cam.downscaled(4.0);
        assert_eq!(d.cx, 15.5);
        assert_eq!(d.fx, 40.0);
    }
}
