use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{HandSkeleton, Sample, Split, ToyConfig};
use crate::depthreg::{DepthImage, DepthNormSpec};
use crate::error::{io_err, AwhError, Result};
use crate::geometry::{CameraIntrinsics, Keypoints3D, NUM_KEYPOINTS};
use crate::simweight::Domain;

pub const MANIFEST_VERSION: &str = "toyhands-v1";

/// First line of every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: String,
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub depth_size: usize,
    pub intrinsics: CameraIntrinsics,
    pub skeleton: HandSkeleton,
}

/// One sample: file references (relative to the manifest) plus annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub depth_path: String,
    pub domain: Domain,
    pub kp2d: [[f64; 2]; NUM_KEYPOINTS],
    pub kp3d: [[f64; 3]; NUM_KEYPOINTS],
    pub d_max: f64,
    pub d_range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_error(&self, index: usize, message: String) -> AwhError {
        AwhError::Manifest {
            path: self.path.clone(),
            line: index + 2,
            message,
        }
    }

    /// Loads the images and depth maps of record `index`.
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let rec = &self.records[index];
        let size = self.header.image_size;
        let img_path = self.root().join(&rec.image_path);
        let rgb = image::open(&img_path)
            .map_err(|e| self.record_error(index, format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        if rgb.width() as usize != size || rgb.height() as usize != size {
            return Err(self.record_error(index, format!("{} has the wrong size", img_path.display())));
        }
        let depth_path = self.root().join(&rec.depth_path);
        let d = image::open(&depth_path)
            .map_err(|e| self.record_error(index, format!("{}: {e}", depth_path.display())))?
            .to_luma16();
        let ds = self.header.depth_size;
        if d.width() as usize != ds || d.height() as usize != ds {
            return Err(self.record_error(index, format!("{} has the wrong size", depth_path.display())));
        }
        let depth = DepthImage::from_u16(ds, d.as_raw())?;
        Ok(Sample {
            image: rgb.into_raw(),
            image_size: size,
            depth,
            depth_spec: DepthNormSpec {
                d_max: rec.d_max,
                d_range: rec.d_range,
            },
            kp3d: Keypoints3D(rec.kp3d),
            kp2d: rec.kp2d,
            domain: rec.domain,
            intrinsics: self.header.intrinsics,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.records.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Writes samples' PNG files next to the manifest and the manifest itself.
pub fn write_manifest(samples: &[Sample], path: &Path, cfg: &ToyConfig, split: Split) -> Result<Manifest> {
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let img_dir = Path::new("images").join(split.name());
    let depth_dir = Path::new("depth").join(split.name());
    for dir in [&img_dir, &depth_dir] {
        fs::create_dir_all(root.join(dir)).map_err(io_err(root.join(dir)))?;
    }
    let header = ManifestHeader {
        version: MANIFEST_VERSION.into(),
        split,
        count: samples.len(),
        seed: cfg.seed,
        image_size: cfg.image_size,
        depth_size: cfg.depth_size,
        intrinsics: cfg.intrinsics(),
        skeleton: cfg.skeleton.clone(),
    };
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_rel = img_dir.join(format!("{i:06}.png"));
        let depth_rel = depth_dir.join(format!("{i:06}.png"));
        let image_path = root.join(&image_rel);
        let rgb = RgbImage::from_raw(s.image_size as u32, s.image_size as u32, s.image.clone())
            .ok_or_else(|| AwhError::Image {
                path: image_path.clone(),
                message: "pixel buffer does not match the image size".into(),
            })?;
        rgb.save(&image_path).map_err(|e| AwhError::Image {
            path: image_path.clone(),
            message: e.to_string(),
        })?;
        let depth_path = root.join(&depth_rel);
        let ds = s.depth.size as u32;
        let d: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(ds, ds, s.depth.to_u16()).expect("depth buffer matches its size");
        d.save(&depth_path).map_err(|e| AwhError::Image {
            path: depth_path.clone(),
            message: e.to_string(),
        })?;
        records.push(ManifestRecord {
            image_path: path_string(&image_rel),
            depth_path: path_string(&depth_rel),
            domain: s.domain,
            kp2d: s.kp2d,
            kp3d: s.kp3d.0,
            d_max: s.depth_spec.d_max,
            d_range: s.depth_spec.d_range,
        });
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", json_line(&header)).map_err(io_err(path))?;
    for r in &records {
        writeln!(w, "{}", json_line(r)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(Manifest {
        path: path.to_path_buf(),
        header,
        records,
    })
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("manifest types serialize")
}

/// Parses a manifest and checks that its record count matches the header and that
/// every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let err = |line: usize, message: String| AwhError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| err(1, "empty manifest".into()))?
        .map_err(io_err(path))?;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.version != MANIFEST_VERSION {
        return Err(err(1, format!("unsupported version `{}`", header.version)));
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| err(n, format!("bad record: {e}")))?;
        for f in [&rec.image_path, &rec.depth_path] {
            if !root.join(f).is_file() {
                return Err(err(n, format!("missing file {f}")));
            }
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(err(
            records.len() + 1,
            format!("header declares {} records, found {}", header.count, records.len()),
        ));
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        header,
        records,
    })
}
