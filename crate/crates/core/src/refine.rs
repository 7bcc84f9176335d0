//! Patient-specific landmark refinement and the detector error table.
//!
//! Detections over a set of poses are backprojected into rays. For every pair
//! of rays of one landmark the midpoint of their closest points is kept when
//! the rays pass within `tau_mm` of each other; the per-coordinate median of
//! the kept midpoints is the cluster barycenter, which is then snapped to the
//! nearest bone-surface point.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect, project_landmarks, Detection2DSet, DetectorConfig, DetectorModel};
use crate::geometry::{backproject, CameraIntrinsics, PoseSet, Ray};
use crate::pnp::landmark_distance;
use crate::volume::{bone_mask, surface_points, SurfacePointSet, Volume, VolumeError, LANDMARK_COUNT};
use crate::Execution;

pub use crate::volume::{LandmarkProvenance, LandmarkSet3D};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("need at least {need} poses, got {got}")]
    TooFewPoses { need: usize, got: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub tau_mm: f64,
    pub min_rays: usize,
    pub min_valid_pairs: usize,
    pub parallel_eps: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            tau_mm: 15.0,
            min_rays: 2,
            min_valid_pairs: 1,
            parallel_eps: 1e-6,
        }
    }
}

/// Midpoint of the closest points of two lines and the gap between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMidpoint {
    pub point: Vector3<f64>,
    pub gap: f64,
}

/// Closest equidistant point of two rays; `None` when they are (near) parallel.
pub fn pair_midpoint(r1: &Ray, r2: &Ray, parallel_eps: f64) -> Option<PairMidpoint> {
    let (d1, d2) = (r1.direction, r2.direction);
    if d1.cross(&d2).norm() < parallel_eps {
        return None;
    }
    let w = r1.origin - r2.origin;
    let b = d1.dot(&d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let p1 = r1.at(s);
    let p2 = r2.at(t);
    Some(PairMidpoint {
        point: (p1 + p2) * 0.5,
        gap: (p1 - p2).norm(),
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-coordinate median of a non-empty point list.
pub fn coordinate_median(points: &[Vector3<f64>]) -> Vector3<f64> {
    assert!(!points.is_empty());
    let mut out = Vector3::zeros();
    for c in 0..3 {
        let mut col: Vec<f64> = points.iter().map(|p| p[c]).collect();
        out[c] = median(&mut col);
    }
    out
}

/// Cluster barycenter of the rays of one landmark; `None` is UNRESOLVED.
pub fn cluster_landmark(rays: &[Ray], cfg: &RefineConfig) -> Option<Vector3<f64>> {
    if rays.len() < cfg.min_rays.max(2) {
        return None;
    }
    let mut kept = Vec::new();
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            if let Some(m) = pair_midpoint(&rays[i], &rays[j], cfg.parallel_eps) {
                if m.gap <= cfg.tau_mm {
                    kept.push(m.point);
                }
            }
        }
    }
    if kept.is_empty() || kept.len() < cfg.min_valid_pairs {
        return None;
    }
    Some(coordinate_median(&kept))
}

/// Intermediate and final products of one refinement run.
#[derive(Debug, Clone)]
pub struct Refinement {
    /// Rays per landmark, in pose order.
    pub rays: Vec<Vec<Ray>>,
    /// Cluster barycenters (CLUSTER provenance).
    pub cluster: LandmarkSet3D,
    /// Barycenters snapped to the bone surface (BONE provenance).
    pub bone: LandmarkSet3D,
}

/// Bone surface used for snapping: boundary voxels of the `[200, 500]` HU band.
pub fn bone_surface(v: &Volume) -> Result<SurfacePointSet, RefineError> {
    Ok(surface_points(&bone_mask(v, 200.0, 500.0)?)?)
}

/// Refines the detector's landmarks from its detections over `poses`.
#[allow(clippy::too_many_arguments)]
pub fn refine_landmarks(
    volume: &Volume,
    detector: &DetectorModel,
    poses: &PoseSet,
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
    det_cfg: &DetectorConfig,
    seed: u64,
    exec: Execution,
) -> Result<LandmarkSet3D, RefineError> {
    let surface = bone_surface(volume)?;
    Ok(refine_with_surface(&surface, detector, poses, k, cfg, det_cfg, seed, exec)?.bone)
}

/// [`refine_landmarks`] against a precomputed surface, returning every stage.
#[allow(clippy::too_many_arguments)]
pub fn refine_with_surface(
    surface: &SurfacePointSet,
    detector: &DetectorModel,
    poses: &PoseSet,
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
    det_cfg: &DetectorConfig,
    seed: u64,
    exec: Execution,
) -> Result<Refinement, RefineError> {
    if poses.len() < 2 {
        return Err(RefineError::TooFewPoses {
            need: 2,
            got: poses.len(),
        });
    }
    let detections = exec.map_range(poses.len(), |i| detect(&poses.poses[i], k, detector, det_cfg, seed));
    let rays: Vec<Vec<Ray>> = (0..LANDMARK_COUNT)
        .map(|j| {
            poses
                .poses
                .iter()
                .zip(&detections)
                .filter_map(|(pose, d)| d.location(j).map(|px| backproject(pose, k, &px)))
                .collect()
        })
        .collect();
    let cluster: Vec<Option<Vector3<f64>>> = exec.map_range(LANDMARK_COUNT, |j| cluster_landmark(&rays[j], cfg));
    let bone = cluster
        .iter()
        .map(|c| c.map(|p| surface.nearest(&p)).transpose())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Refinement {
        rays,
        cluster: LandmarkSet3D::new(LandmarkProvenance::Cluster, cluster),
        bone: LandmarkSet3D::new(LandmarkProvenance::Bone, bone),
    })
}

/// Per-pose detections and their distances to the exact projections.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrorTable {
    pub poses: PoseSet,
    pub detections: Vec<Detection2DSet>,
    /// One row of [`LANDMARK_COUNT`] distances per pose.
    pub distances: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PoseErrorTableJson {
    schema_version: u32,
    poses: PoseSet,
    /// Detection CSV per pose.
    detections: Vec<String>,
    distances: Vec<Vec<f64>>,
}

impl Serialize for PoseErrorTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseErrorTableJson {
            schema_version: crate::SCHEMA_VERSION,
            poses: self.poses.clone(),
            detections: self.detections.iter().map(|d| d.to_csv_string()).collect(),
            distances: self.distances.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseErrorTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = PoseErrorTableJson::deserialize(d)?;
        let detections = j
            .detections
            .iter()
            .map(|c| Detection2DSet::read_csv(c.as_bytes()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        if detections.len() != j.poses.len() || j.distances.len() != j.poses.len() {
            return Err(D::Error::custom("table columns differ in length"));
        }
        if j.distances.iter().any(|r| r.len() != LANDMARK_COUNT) {
            return Err(D::Error::custom("distance rows must have 23 entries"));
        }
        Ok(PoseErrorTable {
            poses: j.poses,
            detections,
            distances: j.distances,
        })
    }
}

impl PoseErrorTable {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Runs the (retrained) detector over `poses` and records its errors against
/// the exact projections of `landmarks`.
#[allow(clippy::too_many_arguments)]
pub fn build_error_table(
    detector: &DetectorModel,
    poses: &PoseSet,
    k: &CameraIntrinsics,
    landmarks: &LandmarkSet3D,
    det_cfg: &DetectorConfig,
    min_poses: usize,
    seed: u64,
    exec: Execution,
) -> Result<PoseErrorTable, RefineError> {
    if poses.len() < min_poses.max(1) {
        return Err(RefineError::TooFewPoses {
            need: min_poses.max(1),
            got: poses.len(),
        });
    }
    let rows = exec.map_range(poses.len(), |i| {
        let pose = &poses.poses[i];
        let x = detect(pose, k, detector, det_cfg, seed);
        let y = project_landmarks(pose, k, landmarks);
        let w: Vec<f64> = (0..LANDMARK_COUNT)
            .map(|j| landmark_distance(x.location(j), y.location(j)))
            .collect();
        (x, w)
    });
    let (detections, distances) = rows.into_iter().unzip();
    Ok(PoseErrorTable {
        poses: poses.clone(),
        detections,
        distances,
    })
}
