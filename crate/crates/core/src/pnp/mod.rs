//! Pose estimation from 2D/3D landmark correspondences with pose-dependent weights.
//!
//! The detection metric treats a MISSED slot as the sentinel `(-1, -1)`:
//! one-sided misses cost [`MISSED_PENALTY`] pixels, two misses cost nothing.
//! Per-landmark weights come from the detector errors recorded for the `k`
//! stored poses whose detections are closest to the query.

mod solve;

pub use solve::{dlt, refine_lm, solve_pnp, LmResult, PnPDiagnostics, PnPMode, PnPResult};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Detection2DSet;
use crate::refine::PoseErrorTable;

/// Distance assigned when exactly one of two slots is MISSED, in pixels.
pub const MISSED_PENALTY: f64 = 40.0;

#[derive(Debug, Error, PartialEq)]
pub enum PnPError {
    #[error("k = {k} exceeds the table length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("no detected landmarks")]
    NoDetections,
    #[error("need at least {need} correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("non-finite residual")]
    NonFiniteResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnPConfig {
    pub k_neighbours: usize,
    pub lm_max_iter: usize,
    pub lm_tolerance: f64,
    pub weight_floor: f64,
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self {
            k_neighbours: 11,
            lm_max_iter: 200,
            lm_tolerance: 1e-10,
            weight_floor: 0.05,
        }
    }
}

/// Per-landmark weights; `None` marks a landmark absent from the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<Option<f64>>);

impl WeightVector {
    pub fn uniform(mask: &[bool]) -> Self {
        Self(mask.iter().map(|&m| m.then_some(1.0)).collect())
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.0[i]
    }
}

/// Detection distance between two slots (pixels).
pub fn landmark_distance(x: Option<Vector2<f64>>, y: Option<Vector2<f64>>) -> f64 {
    match (x, y) {
        (None, None) => 0.0,
        (Some(a), Some(b)) => (a - b).norm(),
        _ => MISSED_PENALTY,
    }
}

/// Mean slot distance between two detection sets.
pub fn pose_distance(a: &Detection2DSet, b: &Detection2DSet) -> f64 {
    assert_eq!(a.len(), b.len(), "detection sets differ in length");
    let sum: f64 = (0..a.len())
        .map(|i| landmark_distance(a.location(i), b.location(i)))
        .sum();
    sum / a.len() as f64
}

/// Indices of the `k` table entries closest to `query`; ties go to the lower index.
pub fn knn(query: &Detection2DSet, table: &PoseErrorTable, k: usize) -> Result<Vec<usize>, PnPError> {
    let d: Vec<f64> = table
        .detections
        .iter()
        .map(|t| pose_distance(query, t))
        .collect();
    knn_by_distance(&d, k)
}

pub(crate) fn knn_by_distance(d: &[f64], k: usize) -> Result<Vec<usize>, PnPError> {
    if k > d.len() {
        return Err(PnPError::KTooLarge { k, len: d.len() });
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Averages the neighbours' recorded errors and turns them into weights.
pub fn weights_from_neighbours(
    table: &PoseErrorTable,
    neighbours: &[usize],
    detected: &[bool],
    floor: f64,
) -> Result<WeightVector, PnPError> {
    let mean: Vec<f64> = (0..detected.len())
        .map(|j| {
            let s: f64 = neighbours.iter().map(|&i| table.distances[i][j]).sum();
            s / neighbours.len().max(1) as f64
        })
        .collect();
    weights_from_errors(&mean, detected, floor)
}

/// Weights from a sample's own per-landmark errors.
pub fn ground_truth_weights(errors: &[f64], detected: &[bool], floor: f64) -> Result<WeightVector, PnPError> {
    weights_from_errors(errors, detected, floor)
}

/// Inverts mean errors (a zero error counts as one) and rescales the inverses
/// of the detected landmarks to mean 1 and population std 0.5.
pub fn weights_from_errors(errors: &[f64], detected: &[bool], floor: f64) -> Result<WeightVector, PnPError> {
    assert_eq!(errors.len(), detected.len());
    let present: Vec<usize> = (0..errors.len()).filter(|&j| detected[j]).collect();
    if present.is_empty() {
        return Err(PnPError::NoDetections);
    }
    let raw: Vec<f64> = present
        .iter()
        .map(|&j| {
            let d = errors[j];
            1.0 / if d == 0.0 { 1.0 } else { d }
        })
        .collect();
    let w = rescale(&raw, 1.0, 0.5, floor);
    let mut out = vec![None; errors.len()];
    for (&j, w) in present.iter().zip(w) {
        out[j] = Some(w);
    }
    Ok(WeightVector(out))
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Affine rescale of `raw` to the target mean and population std, keeping
/// every entry at or above `floor`.
///
/// Entries that would fall below the floor are pinned to it and the others are
/// re-fitted with a fresh increasing affine map so the overall mean and std
/// still hit the targets. When that is impossible the plain affine result is
/// clamped.
pub fn rescale(raw: &[f64], mean: f64, std: f64, floor: f64) -> Vec<f64> {
    let n = raw.len();
    let (m, s) = mean_std(raw);
    if s == 0.0 || !s.is_finite() {
        return vec![mean; n];
    }
    let plain: Vec<f64> = raw.iter().map(|r| mean + std * (r - m) / s).collect();
    if plain.iter().all(|&w| w >= floor) {
        return plain;
    }
    let clamped = || plain.iter().map(|w| w.max(floor)).collect::<Vec<_>>();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let total = n as f64 * mean;
    let total_sq = n as f64 * (std * std + mean * mean);
    // pin the `pinned` smallest raw values to the floor
    let mut pinned = plain.iter().filter(|&&w| w < floor).count();
    while pinned < n {
        let free: Vec<f64> = order[pinned..].iter().map(|&i| raw[i]).collect();
        let nf = free.len() as f64;
        let (fm, fs) = mean_std(&free);
        let target_mean = (total - pinned as f64 * floor) / nf;
        let target_var = (total_sq - pinned as f64 * floor * floor) / nf - target_mean * target_mean;
        if fs == 0.0 || target_var < 0.0 {
            return clamped();
        }
        let b = target_var.sqrt() / fs;
        let a = target_mean - b * fm;
        let below = order[pinned..].iter().filter(|&&i| a + b * raw[i] < floor).count();
        if below == 0 {
            let mut out = vec![floor; n];
            for &i in &order[pinned..] {
                out[i] = a + b * raw[i];
            }
            return out;
        }
        pinned += below;
    }
    clamped()
}
