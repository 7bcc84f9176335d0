//! Landmark detector interface and a simulated detector.
//!
//! The simulated detector stands in for a heatmap network: it projects its
//! target landmarks exactly and perturbs them with isotropic Gaussian jitter
//! whose size depends on the landmark and on the viewing direction,
//!
//! `σ_eff = σ_j · (1 + γ · (1 − |⟨view_dir, a_j⟩|))`,
//!
//! and reports a confidence `exp(−σ_eff / confidence_scale)` that is compared
//! against the threshold `μ`.

use std::io::{Read, Write};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drr::Image;
use crate::geometry::{project, CameraIntrinsics, CameraPose};
use crate::rng;
use crate::volume::{LandmarkSet3D, LANDMARK_COUNT, LANDMARK_NAMES};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image carries no pose provenance")]
    MissingProvenance,
    #[error("detection set must have {LANDMARK_COUNT} slots, got {0}")]
    WrongSlotCount(usize),
    #[error("format error: {0}")]
    Format(String),
}

/// One detector output slot. `location == None` is MISSED, serialized as `(-1, -1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub location: Option<Vector2<f64>>,
    pub confidence: f64,
}

impl Detection {
    pub const MISSED: Detection = Detection {
        location: None,
        confidence: 0.0,
    };

    pub fn found(location: Vector2<f64>, confidence: f64) -> Self {
        Self {
            location: Some(location),
            confidence,
        }
    }

    pub fn is_missed(&self) -> bool {
        self.location.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2DSet {
    pub detections: Vec<Detection>,
}

impl Detection2DSet {
    pub fn new(detections: Vec<Detection>) -> Result<Self, DetectError> {
        if detections.len() != LANDMARK_COUNT {
            return Err(DetectError::WrongSlotCount(detections.len()));
        }
        Ok(Self { detections })
    }

    pub fn all_missed() -> Self {
        Self {
            detections: vec![Detection::MISSED; LANDMARK_COUNT],
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn location(&self, i: usize) -> Option<Vector2<f64>> {
        self.detections[i].location
    }

    pub fn detected_count(&self) -> usize {
        self.detections.iter().filter(|d| !d.is_missed()).count()
    }

    pub fn detected_mask(&self) -> Vec<bool> {
        self.detections.iter().map(|d| !d.is_missed()).collect()
    }

    /// CSV rows `landmark,u,v,confidence`; MISSED rows carry `u = v = -1`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DetectError> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| DetectError::Format(e.to_string());
        wr.write_record(["landmark", "u", "v", "confidence"]).map_err(err)?;
        for (i, d) in self.detections.iter().enumerate() {
            let (u, v) = d.location.map(|p| (p.x, p.y)).unwrap_or((-1.0, -1.0));
            wr.write_record([
                LANDMARK_NAMES[i].to_string(),
                u.to_string(),
                v.to_string(),
                d.confidence.to_string(),
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|e| DetectError::Format(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DetectError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut slots = vec![Detection::MISSED; LANDMARK_COUNT];
        let mut seen = 0;
        for rec in rd.records() {
            let rec = rec.map_err(|e| DetectError::Format(e.to_string()))?;
            let idx = LANDMARK_NAMES
                .iter()
                .position(|n| *n == &rec[0])
                .ok_or_else(|| DetectError::Format(format!("unknown landmark {}", &rec[0])))?;
            let num = |i: usize| {
                rec.get(i)
                    .ok_or_else(|| DetectError::Format("missing column".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| DetectError::Format(e.to_string()))
            };
            let (u, v, c) = (num(1)?, num(2)?, num(3)?);
            slots[idx] = Detection {
                location: (u >= 0.0 && v >= 0.0).then(|| Vector2::new(u, v)),
                confidence: c,
            };
            seen += 1;
        }
        if seen != LANDMARK_COUNT {
            return Err(DetectError::WrongSlotCount(seen));
        }
        Ok(Self { detections: slots })
    }
}

/// Threshold on the detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub mu: f64,
}

impl DetectorConfig {
    pub const REFINE: DetectorConfig = DetectorConfig { mu: 0.7 };
    pub const PNP: DetectorConfig = DetectorConfig { mu: 0.8 };
}

/// Parameters the simulated detector is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Per-landmark base jitter σ_j is drawn uniformly from this range (px).
    pub sigma_px: [f64; 2],
    /// View penalty γ.
    pub view_penalty: f64,
    pub miss_scale: f64,
    pub confidence_scale: f64,
    /// Multiplier on σ_j when the detector is retargeted to refined landmarks.
    pub retrain_gain: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            sigma_px: [0.5, 2.5],
            view_penalty: 3.0,
            miss_scale: 0.01,
            confidence_scale: 40.0,
            retrain_gain: 0.8,
        }
    }
}

impl DetectorParams {
    /// Noise-free detector that never misses an in-view landmark.
    pub fn exact() -> Self {
        Self {
            sigma_px: [0.0, 0.0],
            view_penalty: 0.0,
            miss_scale: 0.0,
            confidence_scale: 40.0,
            retrain_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub targets: LandmarkSet3D,
    pub sigma_px: Vec<f64>,
    /// Unit difficulty axis per landmark.
    pub axes: Vec<Vector3<f64>>,
    pub view_penalty: f64,
    pub miss_scale: f64,
    pub confidence_scale: f64,
}

impl DetectorModel {
    /// Draws per-landmark jitter and difficulty axes from `params`.
    pub fn random(targets: LandmarkSet3D, params: &DetectorParams, seed: u64) -> Self {
        let mut g = rng::stream(seed, &[rng::tag_str("detector-model")]);
        let axes = (0..LANDMARK_COUNT)
            .map(|_| Vector3::from(UnitSphere.sample(&mut g)))
            .collect();
        let sigma_px = (0..LANDMARK_COUNT)
            .map(|_| {
                if params.sigma_px[0] == params.sigma_px[1] {
                    params.sigma_px[0]
                } else {
                    g.random_range(params.sigma_px[0]..params.sigma_px[1])
                }
            })
            .collect();
        Self {
            targets,
            sigma_px,
            axes,
            view_penalty: params.view_penalty,
            miss_scale: params.miss_scale,
            confidence_scale: params.confidence_scale,
        }
    }

    /// The same detector retrained on a new landmark set: difficulty axes are
    /// kept, jitter is redrawn and scaled by `retrain_gain`.
    pub fn retarget(&self, targets: LandmarkSet3D, params: &DetectorParams, seed: u64) -> Self {
        let fresh = Self::random(targets, params, rng::mix(seed, &[rng::tag_str("retrain")]));
        Self {
            sigma_px: fresh
                .sigma_px
                .iter()
                .map(|s| s * params.retrain_gain)
                .collect(),
            axes: self.axes.clone(),
            ..fresh
        }
    }

    /// Effective jitter for landmark `j` seen from `camera_center`.
    pub fn sigma_eff(&self, j: usize, target: &Vector3<f64>, camera_center: &Vector3<f64>) -> f64 {
        let view = (target - camera_center).normalize();
        self.sigma_px[j] * (1.0 + self.view_penalty * (1.0 - view.dot(&self.axes[j]).abs()))
    }

    pub fn confidence(&self, sigma_eff: f64) -> f64 {
        if sigma_eff <= 0.0 {
            1.0
        } else {
            (-sigma_eff / self.confidence_scale).exp()
        }
    }
}

fn pose_key(pose: &CameraPose) -> u64 {
    let bits: Vec<u64> = pose
        .rotation
        .iter()
        .chain(pose.translation.iter())
        .map(|v| v.to_bits())
        .collect();
    rng::mix(0, &bits)
}

/// Simulated inference; deterministic per `(pose, seed, landmark index)`.
pub fn detect(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    model: &DetectorModel,
    cfg: &DetectorConfig,
    seed: u64,
) -> Detection2DSet {
    let center = pose.center();
    let key = pose_key(pose);
    let detections = (0..LANDMARK_COUNT)
        .map(|j| {
            let Some(m) = model.targets.get(j) else {
                return Detection::MISSED;
            };
            let mut g = rng::stream(seed, &[rng::tag_str("detect"), key, j as u64]);
            let n1: f64 = StandardNormal.sample(&mut g);
            let n2: f64 = StandardNormal.sample(&mut g);
            let u: f64 = g.random();
            let Ok(p) = project(pose, k, &m) else {
                return Detection::MISSED;
            };
            if !k.contains(&p) {
                return Detection::MISSED;
            }
            let s = model.sigma_eff(j, &m, &center);
            let loc = p + Vector2::new(n1, n2) * s;
            if !k.contains(&loc) || u < (model.miss_scale * s).min(1.0) {
                return Detection::MISSED;
            }
            let conf = model.confidence(s);
            if conf < cfg.mu {
                Detection {
                    location: None,
                    confidence: conf,
                }
            } else {
                Detection::found(loc, conf)
            }
        })
        .collect();
    Detection2DSet { detections }
}

/// Exact projections of a landmark set; out-of-view or unresolved slots are MISSED.
pub fn project_landmarks(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    landmarks: &LandmarkSet3D,
) -> Detection2DSet {
    let detections = landmarks
        .positions
        .iter()
        .map(|m| match m.map(|m| project(pose, k, &m)) {
            Some(Ok(p)) if k.contains(&p) => Detection::found(p, 1.0),
            _ => Detection::MISSED,
        })
        .collect();
    Detection2DSet { detections }
}

/// Anything that turns an image into per-landmark detections.
pub trait LandmarkDetector {
    fn detect_image(
        &self,
        img: &Image,
        cfg: &DetectorConfig,
        seed: u64,
    ) -> Result<Detection2DSet, DetectError>;
}

impl LandmarkDetector for DetectorModel {
    fn detect_image(
        &self,
        img: &Image,
        cfg: &DetectorConfig,
        seed: u64,
    ) -> Result<Detection2DSet, DetectError> {
        detect_on_image(img, self, cfg, seed)
    }
}

/// Runs the simulated detector on the pose an image was rendered from.
pub fn detect_on_image(
    img: &Image,
    model: &DetectorModel,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<Detection2DSet, DetectError> {
    let prov = img.provenance.ok_or(DetectError::MissingProvenance)?;
    Ok(detect(&prov.pose, &prov.intrinsics, model, cfg, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::Provenance;
    use crate::geometry::carm_pose;
    use crate::volume::LandmarkProvenance;

    fn targets() -> LandmarkSet3D {
        let mut g = rng::stream(99, &[]);
        LandmarkSet3D::complete(
            LandmarkProvenance::Original,
            (0..LANDMARK_COUNT)
                .map(|_| Vector3::new(g.random_range(-60.0..60.0), g.random_range(-60.0..60.0), g.random_range(-40.0..40.0)))
                .collect(),
        )
    }

    fn pose() -> CameraPose {
        carm_pose(12.0, -6.0, 2.0, Vector3::new(5.0, -3.0, 1.0), 600.0)
    }

    #[test]
    fn zero_noise_model_is_exact() {
        let t = targets();
        let model = DetectorModel::random(t.clone(), &DetectorParams::exact(), 1);
        let k = CameraIntrinsics::default();
        let det = detect(&pose(), &k, &model, &DetectorConfig::PNP, 5);
        let truth = project_landmarks(&pose(), &k, &t);
        assert_eq!(det, truth);
        assert!(det.detections.iter().all(|d| d.confidence == 1.0 && !d.is_missed()));
    }

    #[test]
    fn out_of_view_is_missed() {
        let mut t = targets();
        t.positions[3] = Some(Vector3::new(400.0, 0.0, 0.0));
        let model = DetectorModel::random(t, &DetectorParams::exact(), 1);
        let det = detect(&pose(), &CameraIntrinsics::default(), &model, &DetectorConfig::PNP, 5);
        assert!(det.detections[3].is_missed());
        assert_eq!(det.detected_count(), 22);
    }

    #[test]
    fn confidence_threshold_example() {
        let params = DetectorParams {
            sigma_px: [5.0, 5.0],
            view_penalty: 0.0,
            miss_scale: 0.0,
            confidence_scale: 10.0,
            retrain_gain: 1.0,
        };
        let t = targets();
        let k = CameraIntrinsics::default();
        let model = DetectorModel::random(t.clone(), &params, 2);
        assert!((model.confidence(5.0) - 0.6065).abs() < 1e-3);
        assert!((model.confidence(1.0) - 0.9048).abs() < 1e-3);
        let det = detect(&pose(), &k, &model, &DetectorConfig::PNP, 3);
        assert!(det.detections.iter().all(|d| d.is_missed()));
        let model = DetectorModel::random(t, &DetectorParams { sigma_px: [1.0, 1.0], ..params }, 2);
        let det = detect(&pose(), &k, &model, &DetectorConfig::PNP, 3);
        assert_eq!(det.detected_count(), 23);
    }

    #[test]
    fn raising_mu_never_recovers_a_miss() {
        let model = DetectorModel::random(targets(), &DetectorParams::default(), 4);
        let k = CameraIntrinsics::default();
        for seed in 0..20 {
            let lo = detect(&pose(), &k, &model, &DetectorConfig { mu: 0.6 }, seed);
            let hi = detect(&pose(), &k, &model, &DetectorConfig { mu: 0.95 }, seed);
            for (a, b) in lo.detections.iter().zip(&hi.detections) {
                if a.is_missed() {
                    assert!(b.is_missed());
                } else if !b.is_missed() {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn half_normal_mean_error() {
        let params = DetectorParams {
            sigma_px: [2.0, 2.0],
            view_penalty: 0.0,
            miss_scale: 0.0,
            confidence_scale: 40.0,
            retrain_gain: 1.0,
        };
        let t = targets();
        let model = DetectorModel::random(t.clone(), &params, 1);
        let k = CameraIntrinsics::default();
        let truth = project_landmarks(&pose(), &k, &t);
        // mean of |N(0, σ²)| per axis is σ·sqrt(2/π); the radial mean is σ·sqrt(π/2)
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..1000 {
            let det = detect(&pose(), &k, &model, &DetectorConfig::PNP, seed);
            for (d, g) in det.detections.iter().zip(&truth.detections) {
                if let (Some(a), Some(b)) = (d.location, g.location) {
                    sum += (a - b).norm();
                    n += 1;
                }
            }
        }
        let expected = 2.0 * (std::f64::consts::PI / 2.0).sqrt();
        assert!(((sum / n as f64) - expected).abs() / expected < 0.05);
    }

    #[test]
    fn image_entry_point_matches_pose_entry_point() {
        let model = DetectorModel::random(targets(), &DetectorParams::default(), 4);
        let k = CameraIntrinsics::default().downsampled(8);
        let mut img = Image::filled(k.width(), k.height(), 0.5);
        assert!(matches!(
            detect_on_image(&img, &model, &DetectorConfig::PNP, 1),
            Err(DetectError::MissingProvenance)
        ));
        img.provenance = Some(Provenance { pose: pose(), intrinsics: k });
        for seed in 0..3 {
            assert_eq!(
                model.detect_image(&img, &DetectorConfig::PNP, seed).unwrap(),
                detect(&pose(), &k, &model, &DetectorConfig::PNP, seed)
            );
        }
    }

    #[test]
    fn csv_round_trip_uses_sentinel() {
        let model = DetectorModel::random(targets(), &DetectorParams::default(), 4);
        let mut det = detect(&pose(), &CameraIntrinsics::default(), &model, &DetectorConfig::PNP, 9);
        det.detections[0] = Detection::MISSED;
        let text = det.to_csv_string();
        assert!(text.lines().nth(1).unwrap().starts_with("l5_body_anterior,-1,-1,"));
        let back = Detection2DSet::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.detected_mask(), det.detected_mask());
        for (a, b) in back.detections.iter().zip(&det.detections) {
            assert_eq!(a.location, b.location);
        }
    }

    #[test]
    fn retarget_keeps_axes_and_scales_sigma() {
        let params = DetectorParams::default();
        let m = DetectorModel::random(targets(), &params, 4);
        let r = m.retarget(targets(), &params, 4);
        assert_eq!(r.axes, m.axes);
        assert!(r.sigma_px.iter().all(|s| *s <= params.sigma_px[1] * params.retrain_gain));
    }
}
