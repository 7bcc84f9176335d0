//! Experiment orchestration: per-phantom preparation, PnP and registration
//! trials, parameter sweeps and reports.
//!
//! Every random quantity is derived from `(cfg.seed, patient seed, purpose tag,
//! index)`, so a configuration determines every report byte regardless of the
//! execution policy.

pub mod config;
pub mod report;

pub use config::{merge_json, ExperimentConfig, Mode, RegistrationConfig, DEFAULT_CONFIG_JSON};
pub use report::{paired_t_test, summarize, ModeSummary, PairedComparison, RunReport, Summary, TrialRow};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect, project_landmarks, Detection2DSet, DetectorConfig, DetectorModel};
use crate::drr::{render_with, DrrStyle};
use crate::geometry::{
    rotation_error_deg, sample_pose_set, translation_error_decomposed, translation_error_mm, tre_mm, CameraPose,
    PoseSet, PoseSetLabel,
};
use crate::pnp::{landmark_distance, solve_pnp, PnPMode};
use crate::refine::{bone_surface, build_error_table, refine_with_surface, PoseErrorTable, Refinement};
use crate::register::register;
use crate::rng;
use crate::volume::{make_phantom, LandmarkSet3D, Phantom, LANDMARK_COUNT};
use crate::Execution;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Pipeline(String),
}

fn pipeline<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Pipeline(e.to_string())
}

/// Seed of everything belonging to one phantom.
pub fn patient_key(cfg: &ExperimentConfig, patient_seed: u64) -> u64 {
    rng::mix(cfg.seed, &[rng::tag_str("patient"), patient_seed])
}

fn sub_seed(key: u64, what: &str) -> u64 {
    rng::mix(key, &[rng::tag_str(what)])
}

/// Everything computed once per phantom before the test trials.
#[derive(Debug, Clone)]
pub struct PatientContext {
    pub phantom: Phantom,
    /// Detector trained on the annotated landmarks 𝓜.
    pub detector: DetectorModel,
    pub refinement: Refinement,
    /// Detector retrained on the refined landmarks 𝓜′.
    pub retrained: DetectorModel,
    pub table: PoseErrorTable,
    pub test_poses: PoseSet,
    key: u64,
}

impl PatientContext {
    /// The refined landmark set 𝓜′.
    pub fn refined(&self) -> &LandmarkSet3D {
        &self.refinement.bone
    }
}

/// Builds the phantom, refines its landmarks and records the error table.
pub fn prepare_patient(cfg: &ExperimentConfig, patient_seed: u64, exec: Execution) -> Result<PatientContext, HarnessError> {
    let key = patient_key(cfg, patient_seed);
    let k = &cfg.intrinsics;
    let phantom = make_phantom(patient_seed);
    let detector = DetectorModel::random(phantom.landmarks.clone(), &cfg.detector, sub_seed(key, "detector"));
    let s2 = sample_pose_set(PoseSetLabel::S2, &cfg.refine_poses, key).map_err(pipeline)?;
    let s3 = sample_pose_set(PoseSetLabel::S3, &cfg.table_poses, key).map_err(pipeline)?;
    let s4 = sample_pose_set(PoseSetLabel::S4, &cfg.test_poses, key).map_err(pipeline)?;
    let surface = bone_surface(&phantom.volume).map_err(pipeline)?;
    let refinement = refine_with_surface(
        &surface,
        &detector,
        &s2,
        k,
        &cfg.refine,
        &DetectorConfig { mu: cfg.mu_refine },
        sub_seed(key, "refine"),
        exec,
    )
    .map_err(pipeline)?;
    let retrained = detector.retarget(refinement.bone.clone(), &cfg.detector, sub_seed(key, "retrain"));
    let table = build_error_table(
        &retrained,
        &s3,
        k,
        &refinement.bone,
        &DetectorConfig { mu: cfg.mu_pnp },
        cfg.pnp.k_neighbours,
        sub_seed(key, "table"),
        exec,
    )
    .map_err(pipeline)?;
    Ok(PatientContext {
        phantom,
        detector,
        refinement,
        retrained,
        table,
        test_poses: s4,
        key,
    })
}

/// Test-time detections of the retrained detector for trial `pose_id`.
pub fn trial_detections(cfg: &ExperimentConfig, ctx: &PatientContext, pose_id: usize) -> Detection2DSet {
    detect(
        &ctx.test_poses.poses[pose_id],
        &cfg.intrinsics,
        &ctx.retrained,
        &DetectorConfig { mu: cfg.mu_pnp },
        sub_seed(ctx.key, "test"),
    )
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    patient: u64,
    pose_id: usize,
    mode: Mode,
    est: &CameraPose,
    gt: &CameraPose,
    landmarks: &[nalgebra::Vector3<f64>],
    n_detected: usize,
    threshold: f64,
) -> TrialRow {
    let t = translation_error_mm(est, gt);
    let e = translation_error_decomposed(est, gt);
    TrialRow {
        patient,
        pose_id,
        mode,
        translation_error_mm: Some(t),
        rotation_error_deg: Some(rotation_error_deg(&est.rotation, &gt.rotation)),
        ex_mm: Some(e.x),
        ey_mm: Some(e.y),
        ez_mm: Some(e.z),
        tre_mm: tre_mm(est, gt, landmarks).ok(),
        n_detected,
        success: t < threshold,
        status: "ok".into(),
    }
}

fn failed_row(patient: u64, pose_id: usize, mode: Mode, n_detected: usize, status: String) -> TrialRow {
    TrialRow {
        patient,
        pose_id,
        mode,
        translation_error_mm: None,
        rotation_error_deg: None,
        ex_mm: None,
        ey_mm: None,
        ez_mm: None,
        tre_mm: None,
        n_detected,
        success: false,
        status,
    }
}

/// Solves one PnP trial in `mode`; returns the estimated pose alongside the row.
pub fn run_trial(
    cfg: &ExperimentConfig,
    ctx: &PatientContext,
    pose_id: usize,
    mode: Mode,
    detections: &Detection2DSet,
) -> (TrialRow, Option<CameraPose>) {
    let k = &cfg.intrinsics;
    let gt = &ctx.test_poses.poses[pose_id];
    let refined = ctx.refined();
    let patient = ctx.phantom.patient_seed;
    let exact_refined;
    let exact_original;
    let no_retrain;
    let errors: Vec<f64>;
    let (input, pnp_mode) = match mode {
        Mode::Unweighted => (detections, PnPMode::Unweighted),
        Mode::Weighted => (
            detections,
            PnPMode::Weighted {
                table: &ctx.table,
                k: cfg.pnp.k_neighbours,
            },
        ),
        Mode::GtWeighted => {
            exact_refined = project_landmarks(gt, k, refined);
            errors = (0..LANDMARK_COUNT)
                .map(|j| landmark_distance(detections.location(j), exact_refined.location(j)))
                .collect();
            (detections, PnPMode::GtWeighted { errors: &errors })
        }
        Mode::GtProjections => {
            exact_original = project_landmarks(gt, k, &ctx.phantom.landmarks);
            (&exact_original, PnPMode::Unweighted)
        }
        Mode::NoRetrain => {
            no_retrain = detect(gt, k, &ctx.detector, &DetectorConfig { mu: cfg.mu_pnp }, sub_seed(ctx.key, "test"));
            (&no_retrain, PnPMode::Unweighted)
        }
        Mode::Registered => {
            return (failed_row(patient, pose_id, mode, 0, "not a PnP mode".into()), None);
        }
    };
    let landmarks: Vec<_> = ctx.phantom.landmarks.resolved().map(|(_, p)| p).collect();
    match solve_pnp(input, refined, k, pnp_mode, &cfg.pnp) {
        Ok(res) => (
            metrics_row(
                patient,
                pose_id,
                mode,
                &res.pose,
                gt,
                &landmarks,
                res.diagnostics.n_detected,
                cfg.success_threshold_mm,
            ),
            Some(res.pose),
        ),
        Err(e) => (failed_row(patient, pose_id, mode, input.detected_count(), e.to_string()), None),
    }
}

/// Registers from `init` against a DRR of the phantom at the ground-truth pose.
pub fn run_registration_trial(
    cfg: &ExperimentConfig,
    ctx: &PatientContext,
    pose_id: usize,
    init: &CameraPose,
    n_detected: usize,
    exec: Execution,
) -> TrialRow {
    let rc = &cfg.registration;
    let gt = &ctx.test_poses.poses[pose_id];
    let v = &ctx.phantom.volume;
    let k = cfg.intrinsics.downsampled(rc.downsample);
    let style = DrrStyle {
        step_mm: rc.step_mm,
        ..DrrStyle::for_volume(rc.style, v)
    };
    let patient = ctx.phantom.patient_seed;
    let result = render_with(v, gt, &k, &style, exec)
        .map_err(pipeline)
        .and_then(|target| register(init, &target, v, &k, &style, &rc.schedule, exec).map_err(pipeline));
    match result {
        Ok(r) => {
            let landmarks: Vec<_> = ctx.phantom.landmarks.resolved().map(|(_, p)| p).collect();
            metrics_row(
                patient,
                pose_id,
                Mode::Registered,
                &r.pose,
                gt,
                &landmarks,
                n_detected,
                cfg.success_threshold_mm,
            )
        }
        Err(e) => failed_row(patient, pose_id, Mode::Registered, n_detected, e.to_string()),
    }
}

fn run_patients<F>(cfg: &ExperimentConfig, exec: Execution, per_trial: F) -> Vec<TrialRow>
where
    F: Fn(&PatientContext, usize) -> Vec<TrialRow> + Sync + Send,
{
    let mut rows = Vec::new();
    for &patient in &cfg.patient_seeds {
        match prepare_patient(cfg, patient, exec) {
            Ok(ctx) => {
                let per_pose = exec.map_range(ctx.test_poses.len(), |i| per_trial(&ctx, i));
                rows.extend(per_pose.into_iter().flatten());
            }
            Err(e) => {
                // the whole phantom failed: one failure row per planned trial
                for i in 0..cfg.test_poses.count {
                    for &m in &cfg.modes {
                        rows.push(failed_row(patient, i, m, 0, e.to_string()));
                    }
                }
            }
        }
    }
    rows
}

/// PnP trials for every phantom, test pose and configured mode.
pub fn run_initialization_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let rows = run_patients(cfg, exec, |ctx, i| {
        let det = trial_detections(cfg, ctx, i);
        cfg.modes.iter().map(|&m| run_trial(cfg, ctx, i, m, &det).0).collect()
    });
    Ok(RunReport::from_rows(rows))
}

/// Initialization trials followed by a registration from the `init_mode` estimate.
pub fn run_registration_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let init_mode = cfg.registration.init_mode;
    if init_mode == Mode::Registered {
        return Err(HarnessError::Config("registration.init_mode cannot be REGISTERED".into()));
    }
    let inner = if exec.is_parallel() { Execution::Sequential } else { exec };
    let rows = run_patients(cfg, exec, |ctx, i| {
        let det = trial_detections(cfg, ctx, i);
        let mut rows: Vec<TrialRow> = Vec::new();
        let mut init = None;
        for &m in &cfg.modes {
            let (row, pose) = run_trial(cfg, ctx, i, m, &det);
            if m == init_mode {
                init = Some((row.clone(), pose));
            }
            rows.push(row);
        }
        let (init_row, init_pose) = init.unwrap_or_else(|| run_trial(cfg, ctx, i, init_mode, &det));
        rows.push(match init_pose {
            Some(p) => run_registration_trial(cfg, ctx, i, &p, init_row.n_detected, inner),
            None => failed_row(
                ctx.phantom.patient_seed,
                i,
                Mode::Registered,
                init_row.n_detected,
                format!("no initialization: {}", init_row.status),
            ),
        });
        rows
    });
    Ok(RunReport::from_rows(rows))
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Tau,
    MuRefine,
    MuPnp,
    K,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::MuRefine => "mu_refine",
            SweepParam::MuPnp => "mu_pnp",
            SweepParam::K => "k",
        }
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, HarnessError> {
        let mut c = cfg.clone();
        match self {
            SweepParam::Tau => c.refine.tau_mm = value,
            SweepParam::MuRefine => c.mu_refine = value,
            SweepParam::MuPnp => c.mu_pnp = value,
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(HarnessError::Config(format!("k = {value} is not a positive integer")));
                }
                c.pnp.k_neighbours = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "mu_refine" => Ok(SweepParam::MuRefine),
            "mu_pnp" => Ok(SweepParam::MuPnp),
            "k" => Ok(SweepParam::K),
            _ => Err(HarnessError::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

/// One initialization report per value of `param`.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub param: SweepParam,
    pub runs: Vec<(f64, RunReport)>,
}

pub fn run_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    exec: Execution,
) -> Result<SweepReport, HarnessError> {
    let runs = values
        .iter()
        .map(|&v| Ok((v, run_initialization_experiment(&param.apply(cfg, v)?, exec)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(SweepReport { param, runs })
}

#[derive(Serialize)]
struct SweepCsvRow {
    param: &'static str,
    value: f64,
    mode: Mode,
    trials: usize,
    solved: usize,
    success_rate: f64,
    translation_mean_mm: f64,
    translation_std_mm: f64,
    rotation_mean_deg: f64,
    rotation_std_deg: f64,
    improvement_pct: Option<f64>,
    p_value: Option<f64>,
    refined_landmarks: usize,
}

impl SweepReport {
    /// Comparison table: one line per (value, mode).
    pub fn to_csv_string(&self) -> Result<String, HarnessError> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        for (value, rep) in &self.runs {
            let resolved = refined_counts(rep);
            for m in &rep.summary.modes {
                let cmp = rep.comparison(m.mode);
                wr.serialize(SweepCsvRow {
                    param: self.param.name(),
                    value: *value,
                    mode: m.mode,
                    trials: m.trials,
                    solved: m.solved,
                    success_rate: m.success_rate,
                    translation_mean_mm: m.translation_mean_mm,
                    translation_std_mm: m.translation_std_mm,
                    rotation_mean_deg: m.rotation_mean_deg,
                    rotation_std_deg: m.rotation_std_deg,
                    improvement_pct: cmp.map(|c| c.improvement_pct),
                    p_value: cmp.map(|c| c.p_value),
                    refined_landmarks: resolved,
                })
                .map_err(|e| HarnessError::Io(e.to_string()))?;
            }
        }
        let bytes = wr.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf8"))
    }

    /// Writes `sweep_<param>.csv` plus one report directory per value.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |e: std::io::Error| HarnessError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        for (value, rep) in &self.runs {
            rep.write(&dir.join(format!("{}_{value}", self.param.name())))?;
        }
        let mut f = std::fs::File::create(dir.join(format!("sweep_{}.csv", self.param.name()))).map_err(io)?;
        f.write_all(self.to_csv_string()?.as_bytes()).map_err(io)?;
        Ok(())
    }
}

/// Largest detected-landmark count seen in a report, a proxy for how many
/// landmarks survived refinement.
fn refined_counts(rep: &RunReport) -> usize {
    rep.rows
        .iter()
        .filter(|r| r.mode != Mode::GtProjections)
        .map(|r| r.n_detected)
        .max()
        .unwrap_or(0)
}
