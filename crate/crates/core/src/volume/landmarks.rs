//! Named 3D landmark sets.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::VolumeError;

pub const LANDMARK_COUNT: usize = 23;

pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "l5_body_anterior",
    "l5_body_superior",
    "sacral_promontory",
    "sacrum_apex",
    "iliac_crest_left",
    "iliac_crest_right",
    "asis_left",
    "asis_right",
    "psis_left",
    "psis_right",
    "acetabular_roof_left",
    "acetabular_roof_right",
    "femoral_head_left",
    "femoral_head_right",
    "greater_trochanter_left",
    "greater_trochanter_right",
    "lesser_trochanter_left",
    "lesser_trochanter_right",
    "pubic_symphysis",
    "pubic_tubercle_left",
    "pubic_tubercle_right",
    "ischial_tuberosity_left",
    "ischial_tuberosity_right",
];

/// Where the positions of a landmark set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LandmarkProvenance {
    /// The annotated set the detector was trained on.
    Original,
    /// Ray-cluster barycenters.
    Cluster,
    /// Barycenters snapped onto the bone surface.
    Bone,
}

/// Exactly [`LANDMARK_COUNT`] slots; a `None` slot is unresolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet3D {
    pub provenance: LandmarkProvenance,
    pub positions: Vec<Option<Vector3<f64>>>,
}

impl LandmarkSet3D {
    pub fn new(provenance: LandmarkProvenance, positions: Vec<Option<Vector3<f64>>>) -> Self {
        assert_eq!(positions.len(), LANDMARK_COUNT, "landmark sets have 23 slots");
        Self {
            provenance,
            positions,
        }
    }

    pub fn complete(provenance: LandmarkProvenance, positions: Vec<Vector3<f64>>) -> Self {
        Self::new(provenance, positions.into_iter().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<Vector3<f64>> {
        self.positions[i]
    }

    pub fn resolved(&self) -> impl Iterator<Item = (usize, Vector3<f64>)> + '_ {
        self.positions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i, p)))
    }

    pub fn resolved_count(&self) -> usize {
        self.positions.iter().filter(|p| p.is_some()).count()
    }

    /// CSV rows `name,x_mm,y_mm,z_mm`; unresolved slots are omitted.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), VolumeError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["name", "x_mm", "y_mm", "z_mm"])
            .map_err(csv_err)?;
        for (i, p) in self.resolved() {
            wr.write_record([
                LANDMARK_NAMES[i].to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, provenance: LandmarkProvenance) -> Result<Self, VolumeError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut positions = vec![None; LANDMARK_COUNT];
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 4 {
                return Err(VolumeError::Format(format!("expected 4 columns, got {}", rec.len())));
            }
            let idx = LANDMARK_NAMES
                .iter()
                .position(|n| *n == &rec[0])
                .ok_or_else(|| VolumeError::Format(format!("unknown landmark {}", &rec[0])))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| VolumeError::Format(format!("{s}: {e}")))
            };
            positions[idx] = Some(Vector3::new(num(&rec[1])?, num(&rec[2])?, num(&rec[3])?));
        }
        Ok(Self::new(provenance, positions))
    }
}

fn csv_err(e: csv::Error) -> VolumeError {
    VolumeError::Format(e.to_string())
}
