//! Intensity-based 2D/3D registration.
//!
//! The pose is refined by maximizing the normalized cross correlation between
//! a DRR rendered at the current estimate and the target image, in stages that
//! free translation, rotation, then both.
//!
//! Parameters are `(tx, ty, tz)` in mm, a shift of the camera center along the
//! axes of the starting camera, and `(rx, ry, rz)` in degrees, an axis-angle
//! rotation (starting-camera axes) of the camera about the point of its
//! principal ray closest to the isocenter.

mod dfo;

pub use dfo::{minimize_df, DfoError, DfoOptions, DfoResult};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drr::{render_with, DrrError, DrrStyle, Image};
use crate::geometry::{exp_so3, CameraIntrinsics, CameraPose};
use crate::volume::Volume;
use crate::Execution;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("image is constant")]
    ConstantImage,
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch([usize; 2], [usize; 2]),
    #[error(transparent)]
    Drr(#[from] DrrError),
    #[error(transparent)]
    Optimizer(#[from] DfoError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Normalized cross correlation of two equally sized images.
pub fn ncc(a: &Image, b: &Image) -> Result<f64, RegisterError> {
    if a.width != b.width || a.height != b.height {
        return Err(RegisterError::SizeMismatch([a.width, a.height], [b.width, b.height]));
    }
    let n = a.num_pixels() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        ab += dx * dy;
        aa += dx * dx;
        bb += dy * dy;
    }
    let constant = |img: &Image| img.data.iter().all(|&x| x == img.data[0]);
    if aa == 0.0 || bb == 0.0 || constant(a) || constant(b) {
        return Err(RegisterError::ConstantImage);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl Param {
    pub const TRANSLATION: [Param; 3] = [Param::Tx, Param::Ty, Param::Tz];
    pub const ROTATION: [Param; 3] = [Param::Rx, Param::Ry, Param::Rz];

    fn index(self) -> usize {
        self as usize
    }

    fn is_rotation(self) -> bool {
        self.index() >= 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub free_params: Vec<Param>,
    pub initial_radius: f64,
    pub final_radius: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationSchedule {
    pub stages: Vec<Stage>,
    /// Half-width of the search box around the incoming estimate, mm.
    pub translation_bound_mm: f64,
    /// Half-width of the search box around the incoming estimate, degrees.
    pub rotation_bound_deg: f64,
}

impl Default for RegistrationSchedule {
    fn default() -> Self {
        let all = [Param::TRANSLATION, Param::ROTATION].concat();
        Self {
            stages: vec![
                Stage {
                    free_params: Param::TRANSLATION.to_vec(),
                    initial_radius: 4.0,
                    final_radius: 0.05,
                    max_evals: 80,
                },
                Stage {
                    free_params: Param::ROTATION.to_vec(),
                    initial_radius: 1.0,
                    final_radius: 0.02,
                    max_evals: 80,
                },
                Stage {
                    free_params: all,
                    initial_radius: 1.0,
                    final_radius: 0.02,
                    max_evals: 160,
                },
            ],
            translation_bound_mm: 50.0,
            rotation_bound_deg: 20.0,
        }
    }
}

impl RegistrationSchedule {
    pub fn validate(&self) -> Result<(), RegisterError> {
        if self.stages.is_empty() {
            return Err(RegisterError::InvalidSchedule("no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.free_params.is_empty() {
                return Err(RegisterError::InvalidSchedule(format!("stage {i} frees no parameters")));
            }
            if !(s.final_radius > 0.0 && s.final_radius <= s.initial_radius) {
                return Err(RegisterError::InvalidSchedule(format!("stage {i}: need 0 < final_radius <= initial_radius")));
            }
        }
        if !(self.translation_bound_mm > 0.0 && self.rotation_bound_deg > 0.0) {
            return Err(RegisterError::InvalidSchedule("bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Pose at parameter vector `p` relative to `pose0`.
pub fn pose_from_params(pose0: &CameraPose, p: &[f64; 6]) -> CameraPose {
    let q0: Matrix3<f64> = pose0.rotation.transpose();
    let c0 = pose0.center();
    let axis = pose0.view_axis();
    let pivot = c0 + axis * (-c0).dot(&axis);
    let w = q0 * Vector3::new(p[3], p[4], p[5]).map(f64::to_radians);
    let dq = exp_so3(&w);
    let center = pivot + dq * (c0 - pivot) + q0 * Vector3::new(p[0], p[1], p[2]);
    CameraPose::from_center((dq * q0).transpose(), center)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub evals: usize,
    pub best_ncc: f64,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub schema_version: u32,
    pub pose: CameraPose,
    pub stages: Vec<StageDiagnostics>,
    pub render_size: [usize; 2],
}

/// Refines `pose0` so the DRR of `v` matches `target`.
///
/// `k` must describe the target's pixel grid.
pub fn register(
    pose0: &CameraPose,
    target: &Image,
    v: &Volume,
    k: &CameraIntrinsics,
    style: &DrrStyle,
    schedule: &RegistrationSchedule,
    exec: Execution,
) -> Result<RegistrationResult, RegisterError> {
    schedule.validate()?;
    if [target.width, target.height] != k.image_size {
        return Err(RegisterError::SizeMismatch([target.width, target.height], k.image_size));
    }
    let cost = |pose: &CameraPose| -> Result<f64, RegisterError> {
        let img = render_with(v, pose, k, style, exec)?;
        match ncc(&img, target) {
            Ok(c) => Ok(-c),
            // an empty view is as dissimilar as it gets
            Err(RegisterError::ConstantImage) => Ok(1.0),
            Err(e) => Err(e),
        }
    };
    let mut pose = *pose0;
    let mut current = cost(&pose)?;
    let mut stages = Vec::new();
    for stage in &schedule.stages {
        let base = pose;
        let bound = |p: &Param| {
            if p.is_rotation() {
                schedule.rotation_bound_deg
            } else {
                schedule.translation_bound_mm
            }
        };
        let lower: Vec<f64> = stage.free_params.iter().map(|p| -bound(p)).collect();
        let upper: Vec<f64> = stage.free_params.iter().map(bound).collect();
        let mut failure: Option<RegisterError> = None;
        let objective = |x: &[f64]| -> f64 {
            let mut full = [0.0; 6];
            for (p, v) in stage.free_params.iter().zip(x) {
                full[p.index()] = *v;
            }
            match cost(&pose_from_params(&base, &full)) {
                Ok(c) => c,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let res = minimize_df(
            objective,
            &vec![0.0; stage.free_params.len()],
            &lower,
            &upper,
            &DfoOptions {
                rho_begin: stage.initial_radius,
                rho_end: stage.final_radius,
                max_evals: stage.max_evals,
            },
        );
        let res = match (res, failure) {
            (_, Some(e)) => return Err(e),
            (r, None) => r?,
        };
        if res.fx < current {
            let mut full = [0.0; 6];
            for (p, v) in stage.free_params.iter().zip(&res.x) {
                full[p.index()] = *v;
            }
            pose = pose_from_params(&base, &full);
            current = res.fx;
        }
        stages.push(StageDiagnostics {
            evals: res.evals,
            best_ncc: -current,
            pose,
        });
    }
    Ok(RegistrationResult {
        schema_version: crate::SCHEMA_VERSION,
        pose,
        stages,
        render_size: k.image_size,
    })
}
