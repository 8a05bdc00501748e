//! Procedural two-domain hand dataset.
//!
//! Both domains draw poses from one skeleton and one sampler; they differ only in
//! appearance (skin palette, background, blur). Every sample is a pure function
//! of `(seed, split, index)`.

mod manifest;
mod render;

pub use manifest::{read_manifest, write_manifest, Manifest, ManifestHeader, ManifestRecord, MANIFEST_VERSION};
pub use render::{render_sample, RenderSettings};

use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthreg::{DepthImage, DepthNormSpec};
use crate::error::{invalid_config, io_err, Result};
use crate::geometry::{project, CameraIntrinsics, Keypoints3D, NUM_KEYPOINTS};
use crate::simweight::Domain;

pub const NUM_FINGERS: usize = 5;

/// Parent of every joint in the kinematic tree (the root's parent is itself).
pub const PARENTS: [usize; NUM_KEYPOINTS] = [
    0, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19,
];

/// Inclusive angle range, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AngleRange {
    fn degrees(lo: f64, hi: f64) -> Self {
        Self {
            lo: lo.to_radians(),
            hi: hi.to_radians(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec {
    /// Angle of the metacarpal in the palm plane, measured from the middle finger
    /// axis toward the pinky side.
    pub splay: f64,
    /// Metacarpal then three phalanges, mm.
    pub bones: [f64; 4],
    /// Rotation of the metacarpal toward the palm normal (thumb opposition).
    pub base_flex: AngleRange,
    pub abduction: AngleRange,
    /// Flexion at the three joints after the metacarpal.
    pub flex: [AngleRange; 3],
}

/// 21-joint hand: palm root plus five four-joint fingers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandSkeleton {
    pub fingers: [FingerSpec; NUM_FINGERS],
    /// Rendered capsule radii, mm.
    pub palm_radius: f64,
    pub finger_radius: f64,
}

impl Default for HandSkeleton {
    fn default() -> Self {
        let finger = |splay: f64, bones: [f64; 4], abd: f64| FingerSpec {
            splay: splay.to_radians(),
            bones,
            base_flex: AngleRange::degrees(0.0, 0.0),
            abduction: AngleRange::degrees(-abd, abd),
            flex: [
                AngleRange::degrees(-10.0, 80.0),
                AngleRange::degrees(0.0, 100.0),
                AngleRange::degrees(0.0, 70.0),
            ],
        };
        let thumb = FingerSpec {
            splay: (-42f64).to_radians(),
            bones: [42.0, 34.0, 28.0, 24.0],
            base_flex: AngleRange::degrees(0.0, 45.0),
            abduction: AngleRange::degrees(-20.0, 25.0),
            flex: [
                AngleRange::degrees(0.0, 50.0),
                AngleRange::degrees(0.0, 60.0),
                AngleRange::degrees(0.0, 80.0),
            ],
        };
        Self {
            fingers: [
                thumb,
                finger(-12.0, [70.0, 40.0, 24.0, 20.0], 15.0),
                finger(0.0, [68.0, 44.0, 28.0, 22.0], 10.0),
                finger(11.0, [64.0, 41.0, 27.0, 21.0], 12.0),
                finger(22.0, [58.0, 32.0, 20.0, 18.0], 18.0),
            ],
            palm_radius: 13.0,
            finger_radius: 8.0,
        }
    }
}

impl HandSkeleton {
    pub fn validate(&self) -> Result<()> {
        for f in &self.fingers {
            if f.bones.iter().any(|&b| !(b > 0.0)) {
                return Err(invalid_config("bone lengths must be positive"));
            }
            let ranges = std::iter::once(&f.base_flex)
                .chain(std::iter::once(&f.abduction))
                .chain(f.flex.iter());
            for r in ranges {
                if !(r.lo <= r.hi) {
                    return Err(invalid_config("joint-angle limits must satisfy lo <= hi"));
                }
            }
        }
        if !(self.palm_radius > 0.0 && self.finger_radius > 0.0) {
            return Err(invalid_config("capsule radii must be positive"));
        }
        Ok(())
    }

    /// Length of the bone ending at `joint` (joint 0 has none).
    pub fn bone_length(&self, joint: usize) -> f64 {
        assert!(joint > 0 && joint < NUM_KEYPOINTS);
        let f = (joint - 1) / 4;
        self.fingers[f].bones[(joint - 1) % 4]
    }

    /// Joints in hand-local coordinates (root at the origin, fingers along +y,
    /// palm facing -z) for explicit joint angles.
    pub fn forward_kinematics(&self, angles: &[FingerAngles; NUM_FINGERS]) -> [[f64; 3]; NUM_KEYPOINTS] {
        let palm_normal = Vector3::new(0.0, 0.0, -1.0);
        let mut pts = [[0.0; 3]; NUM_KEYPOINTS];
        for (f, (spec, a)) in self.fingers.iter().zip(angles).enumerate() {
            let splay = Vector3::new(spec.splay.sin(), spec.splay.cos(), 0.0);
            // metacarpal, tilted toward the palm for thumb opposition
            let meta = splay * a.base_flex.cos() + palm_normal * a.base_flex.sin();
            let base = 1 + 4 * f;
            let mut p = meta * spec.bones[0];
            pts[base] = [p.x, p.y, p.z];
            // finger plane: abducted direction in the palm plane and the palm normal
            let abducted = Rotation3::from_axis_angle(&Vector3::z_axis(), -a.abduction) * splay;
            let lateral = meta.cross(&palm_normal);
            let along = if f == 0 && lateral.norm() > 1e-12 {
                // the thumb keeps flexing in the plane of its tilted metacarpal
                let n = lateral.cross(&meta).normalize();
                (Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(n), -a.abduction) * meta)
                    .normalize()
            } else {
                abducted
            };
            let bend = along.cross(&palm_normal).cross(&along).normalize();
            let mut psi = 0.0;
            for j in 0..3 {
                psi += a.flex[j];
                let dir = along * psi.cos() + bend * psi.sin();
                p += dir * spec.bones[j + 1];
                pts[base + 1 + j] = [p.x, p.y, p.z];
            }
        }
        pts
    }
}

/// Joint angles of one finger, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FingerAngles {
    pub base_flex: f64,
    pub abduction: f64,
    pub flex: [f64; 3],
}

/// Pose-sampling ranges shared by both domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSampler {
    pub root_depth_mm: (f64, f64),
    /// Root projection offset from the image center, as a fraction of the image.
    pub center_jitter: f64,
    /// Pixels every keypoint must keep from the image border.
    pub margin_px: f64,
    /// Largest angle between the palm normal and the viewing direction;
    /// 180 gives uniformly random rotations.
    pub max_tilt_deg: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            root_depth_mm: (400.0, 800.0),
            center_jitter: 0.08,
            margin_px: 2.0,
            max_tilt_deg: 60.0,
        }
    }
}

/// Focal length of the fixed camera in image widths.
pub const FOCAL_WIDTHS: f64 = 3.0;

/// Fixed camera for a square image of side `size`.
pub fn default_intrinsics(size: usize) -> CameraIntrinsics {
    let s = size as f64;
    let c = s / 2.0 - 0.5;
    CameraIntrinsics {
        fx: FOCAL_WIDTHS * s,
        fy: FOCAL_WIDTHS * s,
        cx: c,
        cy: c,
    }
}

/// Random joint angles within limits, a random global rotation (uniform roll
/// about the viewing axis, palm normal uniform on a cone of half-angle
/// `max_tilt_deg` around the camera-facing direction) and a
/// root depth drawn from the sampler's range. The hand is centered as in a crop:
/// the keypoint centroid projects near the image center.
pub fn sample_pose(
    rng: &mut ChaCha8Rng,
    skeleton: &HandSkeleton,
    sampler: &PoseSampler,
    cam: &CameraIntrinsics,
    image_size: usize,
) -> Keypoints3D {
    let mut angles = [FingerAngles::default(); NUM_FINGERS];
    for (a, f) in angles.iter_mut().zip(&skeleton.fingers) {
        a.base_flex = f.base_flex.sample(rng);
        a.abduction = f.abduction.sample(rng);
        for j in 0..3 {
            a.flex[j] = f.flex[j].sample(rng);
        }
    }
    let local = skeleton.forward_kinematics(&angles);
    let q = random_rotation(rng, sampler.max_tilt_deg.to_radians());
    let (lo, hi) = sampler.root_depth_mm;
    let z = rng.random_range(lo..=hi);
    let jitter = sampler.center_jitter * image_size as f64;
    let u = cam.cx + rng.random_range(-jitter..=jitter);
    let v = cam.cy + rng.random_range(-jitter..=jitter);
    let rotated: Vec<Vector3<f64>> = local.iter().map(|p| q * Vector3::new(p[0], p[1], p[2])).collect();
    let m = rotated.iter().sum::<Vector3<f64>>() / rotated.len() as f64;
    // the keypoint centroid projects to (u, v)
    let zc = z + m.z;
    let root = Vector3::new((u - cam.cx) * zc / cam.fx - m.x, (v - cam.cy) * zc / cam.fy - m.y, z);
    let mut out = [[0.0; 3]; NUM_KEYPOINTS];
    for (o, r) in out.iter_mut().zip(&rotated) {
        let w = r + root;
        *o = [w.x, w.y, w.z];
    }
    Keypoints3D(out)
}

fn random_rotation(rng: &mut ChaCha8Rng, max_tilt: f64) -> UnitQuaternion<f64> {
    let tau = std::f64::consts::TAU;
    let roll = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..tau));
    // uniform on the spherical cap
    let cos_min = max_tilt.min(std::f64::consts::PI).cos();
    let tilt = rng.random_range(cos_min..=1.0f64).acos();
    let phi = rng.random_range(0.0..tau);
    let axis = nalgebra::Unit::new_normalize(Vector3::new(phi.cos(), phi.sin(), 0.0));
    UnitQuaternion::from_axis_angle(&axis, tilt) * roll
}

/// True when every keypoint is in front of the camera and projects inside the
/// image with the sampler's margin.
pub fn in_frame(p: &Keypoints3D, cam: &CameraIntrinsics, image_size: usize, margin: f64) -> bool {
    let Ok(uv) = project(p, cam) else {
        return false;
    };
    let hi = image_size as f64 - 1.0 - margin;
    uv.iter().all(|[u, v]| *u >= margin && *u <= hi && *v >= margin && *v <= hi)
}

/// One rendered hand with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major RGB, 8 bits per channel.
    pub image: Vec<u8>,
    pub image_size: usize,
    pub depth: DepthImage,
    pub depth_spec: DepthNormSpec,
    pub kp3d: Keypoints3D,
    pub kp2d: [[f64; 2]; NUM_KEYPOINTS],
    pub domain: Domain,
    pub intrinsics: CameraIntrinsics,
}

/// Dataset splits written by [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            _ => Domain::Target,
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetTest => 3,
        }
    }

    pub fn manifest_file(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// Everything that determines a generated dataset. Missing TOML keys take their
/// default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub image_size: usize,
    pub depth_size: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub skeleton: HandSkeleton,
    pub sampler: PoseSampler,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 128,
            depth_size: 32,
            source_train: 8000,
            target_train: 1000,
            target_test: 1000,
            skeleton: HandSkeleton::default(),
            sampler: PoseSampler::default(),
        }
    }
}

impl ToyConfig {
    /// Reduced dataset for single-core experiments: 64 px images, 16 px depth.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            depth_size: 16,
            source_train: 512,
            target_train: 128,
            target_test: 512,
            ..Self::default()
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.image_size < 8 || self.depth_size == 0 || self.image_size % self.depth_size != 0 {
            return Err(invalid_config(
                "image size must be >= 8 and a multiple of the depth size",
            ));
        }
        let (lo, hi) = self.sampler.root_depth_mm;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid_config("root depth range must be positive and ordered"));
        }
        if !(self.sampler.max_tilt_deg > 0.0 && self.sampler.max_tilt_deg <= 180.0) {
            return Err(invalid_config("max_tilt_deg must lie in (0, 180]"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        default_intrinsics(self.image_size)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::TargetTest => self.target_test,
        }
    }

    /// Random stream for one sample, independent of generation order.
    pub fn sample_rng(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((split.stream_id() << 40) | index as u64);
        rng
    }

    /// Draws an in-frame pose from a per-sample stream, retrying out-of-frame draws.
    pub fn pose_for(&self, rng: &mut ChaCha8Rng) -> Keypoints3D {
        let cam = self.intrinsics();
        loop {
            let pose = sample_pose(rng, &self.skeleton, &self.sampler, &cam, self.image_size);
            if in_frame(&pose, &cam, self.image_size, self.sampler.margin_px) {
                return pose;
            }
        }
    }

    /// Sample `index` of `split`, rendered in `domain`.
    pub fn sample_as(&self, split: Split, index: usize, domain: Domain) -> Result<Sample> {
        let mut rng = self.sample_rng(split, index);
        let pose = self.pose_for(&mut rng);
        let settings = RenderSettings::new(self.image_size, self.depth_size, &self.skeleton);
        render_sample(&pose, domain, &settings, &mut rng)
    }

    pub fn sample(&self, split: Split, index: usize) -> Result<Sample> {
        self.sample_as(split, index, split.domain())
    }

    /// All samples of one split, generated on `threads` workers. The output does
    /// not depend on the number of workers.
    pub fn generate_split(&self, split: Split, threads: usize) -> Result<Vec<Sample>> {
        self.validate()?;
        let n = self.count(split);
        let threads = threads.clamp(1, n.max(1));
        let chunk = n.div_ceil(threads).max(1);
        let mut parts: Vec<Result<Vec<Sample>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let end = (start + chunk).min(n);
                    scope.spawn(move || (start..end).map(|i| self.sample(split, i)).collect())
                })
                .collect();
            parts = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Generates every split and writes images, depth maps and one manifest per split
/// under `out_dir`.
pub fn generate_dataset(cfg: &ToyConfig, out_dir: &Path, threads: usize) -> Result<Vec<Manifest>> {
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let samples = cfg.generate_split(split, threads)?;
        let path = out_dir.join(split.manifest_file());
        manifests.push(write_manifest(&samples, &path, cfg, split)?);
    }
    Ok(manifests)
}
