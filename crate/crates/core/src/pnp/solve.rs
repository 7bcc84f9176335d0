use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{ground_truth_weights, knn, weights_from_neighbours, PnPConfig, PnPError, WeightVector};
use crate::detect::Detection2DSet;
use crate::geometry::{exp_so3, nearest_rotation, CameraIntrinsics, CameraPose};
use crate::refine::PoseErrorTable;
use crate::volume::LandmarkSet3D;

const DLT_MIN_POINTS: usize = 6;
const LM_MIN_POINTS: usize = 4;
const DLT_RANK_TOL: f64 = 1e-8;

/// Hartley similarity normalization: centroid to origin, mean distance `target`.
fn normalizer<const D: usize>(pts: &[nalgebra::SVector<f64, D>], target: f64) -> (nalgebra::SVector<f64, D>, f64) {
    let n = pts.len() as f64;
    let c = pts.iter().fold(nalgebra::SVector::<f64, D>::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { target / mean_dist } else { 1.0 };
    (c, s)
}

/// Linear pose estimate from at least six non-coplanar correspondences.
pub fn dlt(
    points2d: &[Vector2<f64>],
    points3d: &[Vector3<f64>],
    k: &CameraIntrinsics,
) -> Result<CameraPose, PnPError> {
    assert_eq!(points2d.len(), points3d.len());
    let n = points2d.len();
    if n < DLT_MIN_POINTS {
        return Err(PnPError::TooFewPoints {
            need: DLT_MIN_POINTS,
            got: n,
        });
    }
    // normalized camera coordinates, then similarity-normalized
    let xn: Vec<Vector2<f64>> = points2d
        .iter()
        .map(|p| {
            Vector2::new(
                (p.x - k.principal_point[0]) / k.focal_px,
                (p.y - k.principal_point[1]) / k.focal_px,
            )
        })
        .collect();
    let (c2, s2) = normalizer(&xn, 2f64.sqrt());
    let (c3, s3) = normalizer(points3d, 3f64.sqrt());
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for i in 0..n {
        let x = (xn[i] - c2) * s2;
        let xw = (points3d[i] - c3) * s3;
        let hw = [xw.x, xw.y, xw.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = hw[j];
            a[(2 * i, 8 + j)] = -x.x * hw[j];
            a[(2 * i + 1, 4 + j)] = hw[j];
            a[(2 * i + 1, 8 + j)] = -x.y * hw[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv[order[10]] / sv[order[0]] < DLT_RANK_TOL {
        return Err(PnPError::DegenerateConfiguration);
    }
    let h = v_t.row(order[11]);
    let pn = nalgebra::Matrix3x4::from_row_slice(&h.iter().copied().collect::<Vec<_>>());
    // undo normalization: P = T2⁻¹ · Pn · T3
    let mut t2_inv = Matrix3::identity() / s2;
    t2_inv[(0, 2)] = c2.x;
    t2_inv[(1, 2)] = c2.y;
    t2_inv[(2, 2)] = 1.0;
    let mut t3 = nalgebra::Matrix4::identity() * s3;
    t3[(3, 3)] = 1.0;
    for r in 0..3 {
        t3[(r, 3)] = -s3 * c3[r];
    }
    let mut p = t2_inv * pn * t3;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let scale = m.singular_values().mean();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(PnPError::DegenerateConfiguration);
    }
    let r = nearest_rotation(&m);
    let t = p.column(3) / scale;
    Ok(CameraPose::new(r, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub pose: CameraPose,
    pub iterations: usize,
    pub final_cost: f64,
}

/// Weighted residuals `sqrt(w)·(π(X) − x)` and, optionally, their Jacobian with
/// respect to a left-multiplied rotation increment and a translation increment.
fn residuals(
    pose: &CameraPose,
    x2: &[Vector2<f64>],
    x3: &[Vector3<f64>],
    sw: &[f64],
    k: &CameraIntrinsics,
    jac: Option<&mut DMatrix<f64>>,
) -> Option<Vec<f64>> {
    let f = k.focal_px;
    let [cx, cy] = k.principal_point;
    let mut r = Vec::with_capacity(2 * x2.len());
    let mut jac = jac;
    for i in 0..x2.len() {
        let rx = pose.rotation * x3[i];
        let p = rx + pose.translation;
        if !(p.z > 0.0) {
            return None;
        }
        let iz = 1.0 / p.z;
        r.push(sw[i] * (f * p.x * iz + cx - x2[i].x));
        r.push(sw[i] * (f * p.y * iz + cy - x2[i].y));
        if let Some(j) = jac.as_deref_mut() {
            let du = Vector3::new(f * iz, 0.0, -f * p.x * iz * iz) * sw[i];
            let dv = Vector3::new(0.0, f * iz, -f * p.y * iz * iz) * sw[i];
            // d(R X)/dω = −[R X]×
            for (row, d) in [(2 * i, du), (2 * i + 1, dv)] {
                let dw = rx.cross(&d);
                for c in 0..3 {
                    j[(row, c)] = dw[c];
                    j[(row, 3 + c)] = d[c];
                }
            }
        }
    }
    r.iter().all(|v| v.is_finite()).then_some(r)
}

/// Levenberg-Marquardt on the weighted reprojection error, starting at `pose0`.
///
/// `weights == None` is the unweighted cost.
pub fn refine_lm(
    pose0: &CameraPose,
    points2d: &[Vector2<f64>],
    points3d: &[Vector3<f64>],
    k: &CameraIntrinsics,
    weights: Option<&[f64]>,
    cfg: &PnPConfig,
) -> Result<LmResult, PnPError> {
    let n = points2d.len();
    assert_eq!(n, points3d.len());
    if n < LM_MIN_POINTS {
        return Err(PnPError::TooFewPoints {
            need: LM_MIN_POINTS,
            got: n,
        });
    }
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|w| w.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut pose = *pose0;
    let mut jac = DMatrix::zeros(2 * n, 6);
    let mut r = residuals(&pose, points2d, points3d, &sw, k, Some(&mut jac)).ok_or(PnPError::NonFiniteResidual)?;
    let mut c = cost(&r);
    let mut jtj: Matrix6<f64> = (jac.transpose() * &jac).fixed_view::<6, 6>(0, 0).into();
    let mut g: Vector6<f64> = (jac.transpose() * nalgebra::DVector::from_column_slice(&r)).fixed_rows::<6>(0).into();
    let mut lambda = 1e-3 * jtj.trace() / 6.0;
    let nu = 2.0;
    let mut iterations = 0;
    while iterations < cfg.lm_max_iter {
        iterations += 1;
        let a = jtj + Matrix6::identity() * lambda;
        let Some(step) = a.cholesky().map(|ch| ch.solve(&(-g))) else {
            lambda *= nu;
            continue;
        };
        if step.norm() < cfg.lm_tolerance {
            break;
        }
        let w = Vector3::new(step[0], step[1], step[2]);
        let cand = CameraPose::new(
            exp_so3(&w) * pose.rotation,
            pose.translation + Vector3::new(step[3], step[4], step[5]),
        );
        match residuals(&cand, points2d, points3d, &sw, k, None) {
            Some(rc) if cost(&rc) < c => {
                pose = cand;
                r = residuals(&pose, points2d, points3d, &sw, k, Some(&mut jac)).ok_or(PnPError::NonFiniteResidual)?;
                c = cost(&r);
                jtj = (jac.transpose() * &jac).fixed_view::<6, 6>(0, 0).into();
                g = (jac.transpose() * nalgebra::DVector::from_column_slice(&r)).fixed_rows::<6>(0).into();
                lambda /= nu;
            }
            _ => lambda *= nu,
        }
        if !lambda.is_finite() {
            break;
        }
    }
    // keep R exactly orthonormal after many small updates
    pose.rotation = nearest_rotation(&pose.rotation);
    Ok(LmResult {
        pose,
        iterations,
        final_cost: c,
    })
}

/// Which weights the solver uses.
#[derive(Debug, Clone, Copy)]
pub enum PnPMode<'a> {
    Unweighted,
    /// Weights from the `k` nearest poses of the error table.
    Weighted { table: &'a PoseErrorTable, k: usize },
    /// Weights from the query's own per-landmark errors.
    GtWeighted { errors: &'a [f64] },
}

impl PnPMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            PnPMode::Unweighted => "UNWEIGHTED",
            PnPMode::Weighted { .. } => "WEIGHTED",
            PnPMode::GtWeighted { .. } => "GT_WEIGHTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnPDiagnostics {
    pub iterations: usize,
    pub final_cost: f64,
    pub n_detected: usize,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnPResult {
    pub schema_version: u32,
    pub pose: CameraPose,
    pub diagnostics: PnPDiagnostics,
}

/// DLT on the detected landmarks with resolved 3D partners, then weighted LM.
pub fn solve_pnp(
    detections: &Detection2DSet,
    landmarks: &LandmarkSet3D,
    k: &CameraIntrinsics,
    mode: PnPMode<'_>,
    cfg: &PnPConfig,
) -> Result<PnPResult, PnPError> {
    let mask: Vec<bool> = (0..detections.len())
        .map(|i| detections.location(i).is_some() && landmarks.get(i).is_some())
        .collect();
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.len() < DLT_MIN_POINTS {
        return Err(PnPError::TooFewPoints {
            need: DLT_MIN_POINTS,
            got: idx.len(),
        });
    }
    let x2: Vec<Vector2<f64>> = idx.iter().map(|&i| detections.location(i).unwrap()).collect();
    let x3: Vec<Vector3<f64>> = idx.iter().map(|&i| landmarks.get(i).unwrap()).collect();
    let weights: WeightVector = match mode {
        PnPMode::Unweighted => WeightVector::uniform(&mask),
        PnPMode::Weighted { table, k } => {
            let nn = knn(detections, table, k)?;
            weights_from_neighbours(table, &nn, &mask, cfg.weight_floor)?
        }
        PnPMode::GtWeighted { errors } => ground_truth_weights(errors, &mask, cfg.weight_floor)?,
    };
    let w: Vec<f64> = idx.iter().map(|&i| weights.get(i).unwrap()).collect();
    let init = dlt(&x2, &x3, k)?;
    let weighted = !matches!(mode, PnPMode::Unweighted);
    let lm = refine_lm(&init, &x2, &x3, k, weighted.then_some(&w[..]), cfg)?;
    Ok(PnPResult {
        schema_version: crate::SCHEMA_VERSION,
        pose: lm.pose,
        diagnostics: PnPDiagnostics {
            iterations: lm.iterations,
            final_cost: lm.final_cost,
            n_detected: idx.len(),
            mode: mode.name().to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{project_landmarks, Detection};
    use crate::geometry::{carm_pose, project, rot_x, rot_y, rotation_error_deg, translation_error_mm};
    use crate::rng;
    use crate::volume::{LandmarkProvenance, LANDMARK_COUNT};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut g = rng::stream(seed, &[]);
        (0..n)
            .map(|_| Vector3::new(g.random_range(-80.0..80.0), g.random_range(-80.0..80.0), g.random_range(-50.0..50.0)))
            .collect()
    }

    fn random_pose(seed: u64) -> CameraPose {
        let mut g = rng::stream(seed, &[7]);
        carm_pose(
            g.random_range(-30.0..30.0),
            g.random_range(-20.0..20.0),
            g.random_range(-5.0..5.0),
            Vector3::new(g.random_range(-20.0..20.0), g.random_range(-20.0..20.0), g.random_range(-20.0..20.0)),
            600.0,
        )
    }

    fn proj(pose: &CameraPose, pts: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
        let k = CameraIntrinsics::default();
        pts.iter().map(|p| project(pose, &k, p).unwrap()).collect()
    }

    #[test]
    fn dlt_exact_and_failure_modes() {
        let k = CameraIntrinsics::default();
        let pts = cloud(1, 8);
        let gt = random_pose(1);
        let x = proj(&gt, &pts);
        let est = dlt(&x, &pts, &k).unwrap();
        for (p, u) in pts.iter().zip(&x) {
            assert!((project(&est, &k, p).unwrap() - u).norm() < 1e-6);
        }
        assert_eq!(
            dlt(&x[..5], &pts[..5], &k),
            Err(PnPError::TooFewPoints { need: 6, got: 5 })
        );
        let flat: Vec<_> = pts.iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
        let xf = proj(&gt, &flat);
        assert_eq!(dlt(&xf, &flat, &k), Err(PnPError::DegenerateConfiguration));
    }

    #[test]
    fn lm_stationary_and_recovery() {
        let k = CameraIntrinsics::default();
        let cfg = PnPConfig::default();
        let pts = cloud(2, 23);
        let gt = random_pose(2);
        let x = proj(&gt, &pts);
        let at = refine_lm(&gt, &x, &pts, &k, None, &cfg).unwrap();
        assert!(at.final_cost < 1e-12);
        assert!(translation_error_mm(&at.pose, &gt) < 1e-9);

        let start = CameraPose::new(rot_x(3.0) * rot_y(4.0) * gt.rotation, gt.translation + Vector3::new(12.0, -10.0, 12.0));
        let out = refine_lm(&start, &x, &pts, &k, None, &cfg).unwrap();
        assert!(translation_error_mm(&out.pose, &gt) < 1e-3);
        assert!(rotation_error_deg(&out.pose.rotation, &gt.rotation) < 1e-4);
        assert!(refine_lm(&start, &x[..3], &pts[..3], &k, None, &cfg).is_err());
    }

    #[test]
    fn equal_weights_give_identical_iterates() {
        let k = CameraIntrinsics::default();
        let cfg = PnPConfig::default();
        let pts = cloud(3, 15);
        let gt = random_pose(3);
        let mut x = proj(&gt, &pts);
        x[2].x += 7.0;
        let start = CameraPose::new(rot_y(2.0) * gt.rotation, gt.translation + Vector3::new(5.0, 5.0, -8.0));
        let a = refine_lm(&start, &x, &pts, &k, None, &cfg).unwrap();
        let b = refine_lm(&start, &x, &pts, &k, Some(&[4.0; 15]), &cfg).unwrap();
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.iterations, b.iterations);
        assert_relative_eq!(4.0 * a.final_cost, b.final_cost, max_relative = 1e-12);
    }

    #[test]
    fn down_weighting_an_outlier_helps() {
        let k = CameraIntrinsics::default();
        let cfg = PnPConfig::default();
        let pts = cloud(4, 12);
        let gt = random_pose(4);
        let mut x = proj(&gt, &pts);
        x[5] += Vector2::new(30.0, 0.0);
        let mut w = vec![1.3; 12];
        w[5] = cfg.weight_floor;
        let uni = refine_lm(&gt, &x, &pts, &k, None, &cfg).unwrap();
        let wtd = refine_lm(&gt, &x, &pts, &k, Some(&w), &cfg).unwrap();
        assert!(translation_error_mm(&wtd.pose, &gt) < translation_error_mm(&uni.pose, &gt));
    }

    fn landmark_set(seed: u64) -> LandmarkSet3D {
        LandmarkSet3D::complete(LandmarkProvenance::Original, cloud(seed, LANDMARK_COUNT))
    }

    #[test]
    fn solve_pnp_exact_and_order_invariant() {
        let k = CameraIntrinsics::default();
        let cfg = PnPConfig::default();
        let lms = landmark_set(5);
        for s in 0..20 {
            let gt = random_pose(100 + s);
            let det = project_landmarks(&gt, &k, &lms);
            let res = solve_pnp(&det, &lms, &k, PnPMode::Unweighted, &cfg).unwrap();
            assert!(translation_error_mm(&res.pose, &gt) < 0.1);
            assert!(rotation_error_deg(&res.pose.rotation, &gt.rotation) < 0.01);
            assert_eq!(res.diagnostics.n_detected, det.detected_count());

            // reversed slot order
            let rev_det = Detection2DSet::new(det.detections.iter().rev().copied().collect()).unwrap();
            let rev_lms = LandmarkSet3D::new(lms.provenance, lms.positions.iter().rev().copied().collect());
            let rev = solve_pnp(&rev_det, &rev_lms, &k, PnPMode::Unweighted, &cfg).unwrap();
            assert!(translation_error_mm(&rev.pose, &res.pose) < 1e-6);
        }
    }

    #[test]
    fn too_few_detections() {
        let k = CameraIntrinsics::default();
        let lms = landmark_set(6);
        let mut det = project_landmarks(&random_pose(6), &k, &lms);
        for d in det.detections.iter_mut().skip(5) {
            *d = Detection::MISSED;
        }
        assert_eq!(
            solve_pnp(&det, &lms, &k, PnPMode::Unweighted, &PnPConfig::default()).unwrap_err(),
            PnPError::TooFewPoints { need: 6, got: 5 }
        );
    }

    #[test]
    fn result_json_round_trip() {
        let k = CameraIntrinsics::default();
        let lms = landmark_set(7);
        let det = project_landmarks(&random_pose(7), &k, &lms);
        let errors = vec![1.0; LANDMARK_COUNT];
        let res = solve_pnp(&det, &lms, &k, PnPMode::GtWeighted { errors: &errors }, &PnPConfig::default()).unwrap();
        let s = serde_json::to_string(&res).unwrap();
        assert!(s.contains("\"mode\":\"GT_WEIGHTED\""));
        assert_eq!(serde_json::from_str::<PnPResult>(&s).unwrap(), res);
    }
}
