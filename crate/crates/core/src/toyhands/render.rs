use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{default_intrinsics, HandSkeleton, Sample, PARENTS};
use crate::depthreg::{normalize_depth, DepthNormSpec};
use crate::error::{invalid_input, Result};
use crate::geometry::{project, CameraIntrinsics, Keypoints3D, NUM_KEYPOINTS};
use crate::simweight::Domain;

/// Base skin color shared by the source domain.
const SOURCE_SKIN: [f32; 3] = [0.88, 0.68, 0.55];

/// Per-finger multiplicative tint (palm, thumb .. pinky); identical in both domains.
const FINGER_TINT: [[f32; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.25, 0.7, 0.7],
    [0.75, 1.25, 0.75],
    [0.7, 0.8, 1.35],
    [1.2, 1.2, 0.6],
    [1.1, 0.7, 1.3],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub image_size: usize,
    pub depth_size: usize,
    pub palm_radius: f64,
    pub finger_radius: f64,
}

impl RenderSettings {
    pub fn new(image_size: usize, depth_size: usize, skeleton: &HandSkeleton) -> Self {
        Self {
            image_size,
            depth_size,
            palm_radius: skeleton.palm_radius,
            finger_radius: skeleton.finger_radius,
        }
    }
}

/// Per-pixel nearest depth (mm, `INFINITY` on background) and the part label of
/// the visible primitive (0 palm, 1..=5 fingers).
struct ZBuffer {
    size: usize,
    depth: Vec<f64>,
    part: Vec<u8>,
}

impl ZBuffer {
    fn new(size: usize) -> Self {
        Self {
            size,
            depth: vec![f64::INFINITY; size * size],
            part: vec![0; size * size],
        }
    }

    fn bbox(&self, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
        let hi = self.size as f64 - 1.0;
        let x0 = (cx - r).floor().clamp(0.0, hi) as usize;
        let x1 = (cx + r).ceil().clamp(0.0, hi) as usize;
        let y0 = (cy - r).floor().clamp(0.0, hi) as usize;
        let y1 = (cy + r).ceil().clamp(0.0, hi) as usize;
        (x0, x1, y0, y1)
    }

    fn write(&mut self, x: usize, y: usize, z: f64, part: u8) {
        let i = y * self.size + x;
        if z < self.depth[i] {
            self.depth[i] = z;
            self.part[i] = part;
        }
    }

    /// Camera-facing disc at constant depth.
    fn disc(&mut self, c: [f64; 2], r: f64, z: f64, part: u8) {
        let r = r.max(1.0);
        let (x0, x1, y0, y1) = self.bbox(c[0], c[1], r);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
                if dx * dx + dy * dy <= r * r {
                    self.write(x, y, z, part);
                }
            }
        }
    }

    /// Tapered ribbon between two projected joints; depth interpolates linearly.
    fn ribbon(&mut self, a: [f64; 2], b: [f64; 2], ra: f64, rb: f64, za: f64, zb: f64, part: u8) {
        let r = ra.max(rb).max(1.0);
        let (x0, _, y0, _) = self.bbox(a[0].min(b[0]), a[1].min(b[1]), r);
        let (_, x1, _, y1) = self.bbox(a[0].max(b[0]), a[1].max(b[1]), r);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len2 = ex * ex + ey * ey;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (qx, qy) = (x as f64 - a[0], y as f64 - a[1]);
                let t = if len2 > 0.0 {
                    ((qx * ex + qy * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (qx - t * ex, qy - t * ey);
                let rad = (ra + t * (rb - ra)).max(1.0);
                if dx * dx + dy * dy <= rad * rad {
                    self.write(x, y, za + t * (zb - za), part);
                }
            }
        }
    }
}

fn part_of(joint: usize) -> u8 {
    1 + ((joint - 1) / 4) as u8
}

fn rasterize(
    pose: &Keypoints3D,
    cam: &CameraIntrinsics,
    size: usize,
    settings: &RenderSettings,
) -> Result<ZBuffer> {
    let uv = project(pose, cam)?;
    let z: Vec<f64> = pose.0.iter().map(|p| p[2]).collect();
    let radius = |joint: usize| {
        let mm = if joint == 0 {
            settings.palm_radius
        } else {
            settings.finger_radius
        };
        mm * cam.fx / z[joint]
    };
    let mut zb = ZBuffer::new(size);
    for j in 1..NUM_KEYPOINTS {
        let p = PARENTS[j];
        let part = if p == 0 { 0 } else { part_of(j) };
        let ra = if p == 0 { radius(0) } else { radius(p) };
        zb.ribbon(uv[p], uv[j], ra, radius(j), z[p], z[j], part);
    }
    for j in 0..NUM_KEYPOINTS {
        let part = if j == 0 { 0 } else { part_of(j) };
        zb.disc(uv[j], radius(j), z[j], part);
    }
    Ok(zb)
}

/// Smooth random texture in [0, 1]: a few random plane waves plus pixel noise.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.05..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle, freq, phase)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(angle, freq, phase) in &waves {
                let s = x as f64 * angle.cos() + y as f64 * angle.sin();
                v += (freq * s + phase).sin();
            }
            let noise: f64 = rng.random_range(-0.35..0.35);
            out.push(((v / 4.0 + noise) * 0.5 + 0.5).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn box_blur(img: &mut [f32], size: usize) {
    let src = img.to_vec();
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                        if xx >= 0 && yy >= 0 && (xx as usize) < size && (yy as usize) < size {
                            acc += src[(yy as usize * size + xx as usize) * 3 + c];
                            n += 1.0;
                        }
                    }
                }
                img[(y * size + x) * 3 + c] = acc / n;
            }
        }
    }
}

/// Rasterizes a posed hand with domain-specific appearance and a z-buffered
/// normalized depth map. Keypoint annotations are exact projections of the pose.
pub fn render_sample(
    pose: &Keypoints3D,
    domain: Domain,
    settings: &RenderSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let size = settings.image_size;
    if settings.depth_size == 0 || size % settings.depth_size != 0 {
        return Err(invalid_input("image size must be a multiple of the depth size"));
    }
    let cam = default_intrinsics(size);
    let kp2d = project(pose, &cam)?;

    let zb = rasterize(pose, &cam, size, settings)?;
    let fg_depths = zb.depth.iter().copied().filter(|d| d.is_finite());
    let (zmin, zmax) = fg_depths.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });

    let (skin, mut pixels) = match domain {
        Domain::Source => {
            let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let pixels: Vec<f32> = (0..size * size).flat_map(|_| bg).collect();
            (SOURCE_SKIN, pixels)
        }
        Domain::Target => {
            let skin = [
                SOURCE_SKIN[0] * rng.random_range(0.55..1.1f32),
                SOURCE_SKIN[1] * rng.random_range(0.5..1.1f32),
                SOURCE_SKIN[2] * rng.random_range(0.5..1.15f32),
            ];
            let tex = texture(size, rng);
            let c0: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let c1: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let pixels = tex
                .iter()
                .flat_map(|&t| [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t))
                .collect();
            (skin, pixels)
        }
    };
    let span = (zmax - zmin).max(1.0);
    for (i, &d) in zb.depth.iter().enumerate() {
        if d.is_finite() {
            let shade = (1.1 - 0.5 * (d - zmin) / span) as f32;
            let tint = FINGER_TINT[zb.part[i] as usize];
            for c in 0..3 {
                pixels[i * 3 + c] = (skin[c] * tint[c] * shade).clamp(0.0, 1.0);
            }
        }
    }
    if domain == Domain::Target {
        for p in pixels.iter_mut() {
            *p = (*p + rng.random_range(-0.04..0.04f32)).clamp(0.0, 1.0);
        }
        box_blur(&mut pixels, size);
    }
    let image = pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();

    // depth target on the coarse grid, normalized by the hand's keypoint depth extent
    let ds = settings.depth_size;
    let cam_d = cam.downscaled((size / ds) as f64);
    let zd = rasterize(pose, &cam_d, ds, settings)?;
    let kz = pose.0.iter().map(|p| p[2]);
    let (kmin, kmax) = kz.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
        (lo.min(z), hi.max(z))
    });
    let depth_spec = DepthNormSpec {
        d_max: kmax,
        d_range: (kmax - kmin).max(1e-6),
    };
    let mask: Vec<bool> = zd.depth.iter().map(|d| d.is_finite()).collect();
    let depth = normalize_depth(&zd.depth, &mask, ds, &depth_spec)?.quantized();

    Ok(Sample {
        image,
        image_size: size,
        depth,
        depth_spec,
        kp3d: *pose,
        kp2d,
        domain,
        intrinsics: cam,
    })
}
