use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::detect::DetectorParams;
use crate::drr::DrrStyleId;
use crate::geometry::{CameraIntrinsics, PoseSamplingSpec};
use crate::pnp::PnPConfig;
use crate::refine::RefineConfig;
use crate::register::RegistrationSchedule;

/// The shipped defaults; every other configuration is a partial override of it.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../../configs/default.json");

/// How the 2D input and weights of a PnP trial are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Retrained detector, uniform weights.
    Unweighted,
    /// Retrained detector, weights from the k nearest error-table poses.
    Weighted,
    /// Retrained detector, weights from the trial's own detection errors.
    GtWeighted,
    /// Exact projections of the annotated landmarks, uniform weights.
    GtProjections,
    /// Detector still bound to the annotated landmarks, uniform weights.
    NoRetrain,
    /// Intensity-based registration started from the initialization.
    Registered,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Unweighted => "UNWEIGHTED",
            Mode::Weighted => "WEIGHTED",
            Mode::GtWeighted => "GT_WEIGHTED",
            Mode::GtProjections => "GT_PROJECTIONS",
            Mode::NoRetrain => "NO_RETRAIN",
            Mode::Registered => "REGISTERED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Initialization mode the registration starts from.
    pub init_mode: Mode,
    /// Detector binning factor for the similarity images.
    pub downsample: usize,
    pub step_mm: f64,
    pub style: DrrStyleId,
    pub schedule: RegistrationSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds the pose sets, detector draws and trial noise.
    pub seed: u64,
    /// One phantom per seed.
    pub patient_seeds: Vec<u64>,
    pub intrinsics: CameraIntrinsics,
    /// Poses used for landmark refinement.
    pub refine_poses: PoseSamplingSpec,
    /// Poses of the detector error table.
    pub table_poses: PoseSamplingSpec,
    /// Test poses, one trial each.
    pub test_poses: PoseSamplingSpec,
    pub detector: DetectorParams,
    pub mu_refine: f64,
    pub mu_pnp: f64,
    pub refine: RefineConfig,
    pub pnp: PnPConfig,
    pub success_threshold_mm: f64,
    pub modes: Vec<Mode>,
    pub registration: RegistrationConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG_JSON).expect("shipped default config parses")
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, anything else replaces.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl ExperimentConfig {
    /// Parses a (possibly partial) JSON config layered over the defaults.
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let patch: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut base: Value = serde_json::from_str(DEFAULT_CONFIG_JSON).expect("default parses");
        merge_json(&mut base, &patch);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != crate::SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.patient_seeds.is_empty() {
            return bad("patient_seeds is empty".into());
        }
        for (name, mu) in [("mu_refine", self.mu_refine), ("mu_pnp", self.mu_pnp)] {
            if !(0.0..=1.0).contains(&mu) {
                return bad(format!("{name} = {mu} outside [0, 1]"));
            }
        }
        if !(self.refine.tau_mm >= 0.0) {
            return bad("refine.tau_mm must be non-negative".into());
        }
        if self.pnp.k_neighbours == 0 || self.pnp.k_neighbours > self.table_poses.count {
            return bad(format!(
                "pnp.k_neighbours = {} must be in 1..={}",
                self.pnp.k_neighbours, self.table_poses.count
            ));
        }
        if self.refine_poses.count < 2 {
            return bad("refine_poses.count must be >= 2".into());
        }
        if self.registration.downsample == 0 || !self.intrinsics.image_size[0].is_multiple_of(self.registration.downsample) {
            return bad("registration.downsample must divide the image size".into());
        }
        if !(self.success_threshold_mm > 0.0) {
            return bad("success_threshold_mm must be positive".into());
        }
        if self.modes.contains(&Mode::Registered) {
            return bad("REGISTERED is produced by the registration experiment, not a PnP mode".into());
        }
        self.registration
            .schedule
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let d = ExperimentConfig::default();
        d.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&d.to_json()).unwrap(), d);
        assert_eq!(d.patient_seeds.len(), 6);
        assert_eq!(d.test_poses.count, 50);
        assert_eq!(d.pnp, PnPConfig::default());
        assert_eq!(d.refine, RefineConfig::default());
        assert_eq!(d.registration.schedule, RegistrationSchedule::default());
        assert_eq!(d.intrinsics, CameraIntrinsics::default());
        assert_eq!(d.detector, DetectorParams::default());
    }

    #[test]
    fn partial_configs_merge_onto_defaults() {
        let c = ExperimentConfig::from_json_str(r#"{"patient_seeds": [9], "pnp": {"k_neighbours": 3}}"#).unwrap();
        assert_eq!(c.patient_seeds, vec![9]);
        assert_eq!(c.pnp.k_neighbours, 3);
        assert_eq!(c.pnp.lm_max_iter, 200);
        assert!(ExperimentConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"mu_pnp": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json_str("not json").is_err());
    }
}
