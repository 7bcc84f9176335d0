//! Raycasting DRR renderer.
//!
//! Attenuation is `μ(HU) = mu_water · max(0, 1 + HU/1000)`, integrated with a
//! midpoint rule over trilinearly interpolated samples between the ray's entry
//! and exit of the voxel-center box. Four output styles map the raw line
//! integral to intensities before the image is normalized to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject, CameraIntrinsics, CameraPose, Ray};
use crate::volume::Volume;
use crate::{Execution, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum DrrError {
    #[error("volume lies entirely behind the camera")]
    DegeneratePose,
    #[error("invalid style: {0}")]
    InvalidStyle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DrrStyleId {
    /// Raw line integral (publicly available ray caster analog).
    LineIntegral,
    /// Detected energy without log conversion, `exp(-I)`.
    EnergyNoLog,
    /// Log-domain image, min-max display normalized.
    LogConverted,
    /// Two-energy beam-hardening mix of exponentials.
    Hardened,
}

impl DrrStyleId {
    pub const ALL: [DrrStyleId; 4] = [
        DrrStyleId::LineIntegral,
        DrrStyleId::EnergyNoLog,
        DrrStyleId::LogConverted,
        DrrStyleId::Hardened,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrrStyle {
    pub style_id: DrrStyleId,
    pub step_mm: f64,
    /// Attenuation per mm of water.
    pub mu_water: f64,
}

pub const DEFAULT_MU_WATER: f64 = 0.02;

impl DrrStyle {
    /// Style with the default step of half the minimum voxel spacing.
    pub fn for_volume(style_id: DrrStyleId, v: &Volume) -> Self {
        Self {
            style_id,
            step_mm: v.min_spacing() / 2.0,
            mu_water: DEFAULT_MU_WATER,
        }
    }

    pub fn validate(&self, v: &Volume) -> Result<(), DrrError> {
        if !(self.step_mm > 0.0 && self.step_mm <= v.min_spacing()) {
            return Err(DrrError::InvalidStyle(format!(
                "step_mm {} outside (0, {}]",
                self.step_mm,
                v.min_spacing()
            )));
        }
        if !(self.mu_water >= 0.0 && self.mu_water.is_finite()) {
            return Err(DrrError::InvalidStyle(format!("mu_water {}", self.mu_water)));
        }
        Ok(())
    }
}

/// Pose and intrinsics an image was rendered with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

/// Row-major single-channel image with non-negative intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub provenance: Option<Provenance>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
            provenance: None,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn num_pixels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Divides by the maximum so the brightest pixel is 1.
    pub fn normalize_max(&mut self) {
        let m = self.max();
        if m > 0.0 && m.is_finite() {
            self.data.iter_mut().for_each(|x| *x /= m);
        }
    }

    /// Affine min-max stretch to `[0, 1]`; constant images fall back to [`Image::normalize_max`].
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = (self.min(), self.max());
        if hi > lo {
            self.data.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
        } else {
            self.normalize_max();
        }
    }

    /// Writes `<stem>.raw` (f32 LE, row-major) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, DrrError> {
        fs::create_dir_all(dir)?;
        let raw = format!("{stem}.raw");
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(&raw), bytes)?;
        let header = ImageHeader {
            schema_version: SCHEMA_VERSION,
            width: self.width,
            height: self.height,
            dtype: "f32".into(),
            byte_order: "LE".into(),
            data_file: raw,
            provenance: self.provenance,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(
            &path,
            serde_json::to_string_pretty(&header).map_err(|e| DrrError::Format(e.to_string()))?,
        )?;
        Ok(path)
    }

    pub fn load(sidecar: &Path) -> Result<Image, DrrError> {
        let h: ImageHeader = serde_json::from_slice(&fs::read(sidecar)?)
            .map_err(|e| DrrError::Format(format!("{}: {e}", sidecar.display())))?;
        let bytes = fs::read(
            sidecar
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&h.data_file),
        )?;
        if bytes.len() != 4 * h.width * h.height {
            return Err(DrrError::Format(format!(
                "expected {} bytes, got {}",
                4 * h.width * h.height,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Image {
            width: h.width,
            height: h.height,
            data,
            provenance: h.provenance,
        })
    }

    /// 8-bit grayscale PNG, linearly mapped from `[0, max]`.
    pub fn save_png(&self, path: &Path) -> Result<(), DrrError> {
        let m = self.max().max(f64::MIN_POSITIVE);
        let px: Vec<u8> = self
            .data
            .iter()
            .map(|&v| ((v / m).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, px)
            .ok_or_else(|| DrrError::Format("buffer size mismatch".into()))?;
        img.save(path).map_err(|e| DrrError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageHeader {
    #[serde(default)]
    schema_version: u32,
    width: usize,
    height: usize,
    #[serde(default = "default_dtype")]
    dtype: String,
    #[serde(default = "default_order")]
    byte_order: String,
    data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn default_dtype() -> String {
    "f32".into()
}

fn default_order() -> String {
    "LE".into()
}

/// Ray parameters `[t0, t1]` where the ray is inside the box, if any.
fn clip_to_box(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - o) / d;
            let tb = (hi[a] - o) / d;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t1 > t0).then_some((t0, t1))
}

#[inline]
fn attenuation(hu: f64, mu_water: f64) -> f64 {
    mu_water * (1.0 + hu / 1000.0).max(0.0)
}

/// Attenuation line integral along `ray` through `v`; zero if the ray misses.
pub fn line_integral(v: &Volume, ray: &Ray, step_mm: f64, mu_water: f64) -> f64 {
    assert!(step_mm > 0.0, "step_mm must be positive");
    let (lo, hi) = v.bounds();
    let Some((t0, t1)) = clip_to_box(ray, &lo, &hi) else {
        return 0.0;
    };
    let len = t1 - t0;
    let n = (len / step_mm).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let sp = v.spacing();
    // march in continuous voxel coordinates
    let start = ray.at(t0 + 0.5 * h) - lo;
    let mut x = start.x / sp[0];
    let mut y = start.y / sp[1];
    let mut z = start.z / sp[2];
    let dx = ray.direction.x * h / sp[0];
    let dy = ray.direction.y * h / sp[1];
    let dz = ray.direction.z * h / sp[2];
    let mut acc = 0.0;
    for _ in 0..n {
        acc += attenuation(v.trilinear_voxel(x, y, z), mu_water);
        x += dx;
        y += dy;
        z += dz;
    }
    acc * h
}

fn map_style(style: DrrStyleId, raw: f64) -> f64 {
    match style {
        DrrStyleId::LineIntegral | DrrStyleId::LogConverted => raw,
        DrrStyleId::EnergyNoLog => (-raw).exp(),
        DrrStyleId::Hardened => 0.5 * (-raw).exp() + 0.5 * (-0.5 * raw).exp(),
    }
}

/// Unnormalized line-integral image (before the style mapping).
pub fn render_raw(
    v: &Volume,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    step_mm: f64,
    mu_water: f64,
    exec: Execution,
) -> Result<Image, DrrError> {
    let (lo, hi) = v.bounds();
    let corners_in_front = (0..8).any(|c| {
        let p = Vector3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        pose.transform(&p).z > 0.0
    });
    if !corners_in_front {
        return Err(DrrError::DegeneratePose);
    }
    let (w, h) = (k.width(), k.height());
    let mut data = vec![0.0; w * h];
    exec.for_each_chunk(&mut data, w, |row, out| {
        for (col, px) in out.iter_mut().enumerate() {
            let ray = backproject(pose, k, &Vector2::new(col as f64, row as f64));
            *px = line_integral(v, &ray, step_mm, mu_water);
        }
    });
    let mut img = Image::new(w, h, data);
    img.provenance = Some(Provenance {
        pose: *pose,
        intrinsics: *k,
    });
    Ok(img)
}

/// Renders a DRR in the given style, normalized to `[0, 1]`.
pub fn render(
    v: &Volume,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    style: &DrrStyle,
) -> Result<Image, DrrError> {
    render_with(v, pose, k, style, Execution::default())
}

pub fn render_with(
    v: &Volume,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    style: &DrrStyle,
    exec: Execution,
) -> Result<Image, DrrError> {
    style.validate(v)?;
    let mut img = render_raw(v, pose, k, style.step_mm, style.mu_water, exec)?;
    img.data
        .iter_mut()
        .for_each(|x| *x = map_style(style.style_id, *x));
    match style.style_id {
        DrrStyleId::LogConverted => img.normalize_min_max(),
        _ => img.normalize_max(),
    }
    Ok(img)
}
