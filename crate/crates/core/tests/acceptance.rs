//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom harness so the summary lines are always printed. Set
//! `XREG_ACCEPTANCE=1,4,7` to run a subset.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use xreg::augment::{augment, augment_traced, AugmentConfig, Stage};
use xreg::detect::{Detection, Detection2DSet, DetectorConfig, DetectorModel, DetectorParams};
use xreg::drr::{render, DrrStyle, DrrStyleId, Image};
use xreg::geometry::{
    carm_pose, project, rotation_error_deg, sample_pose_set, translation_error_mm, CameraIntrinsics, PoseSamplingSpec,
    PoseSetLabel, Ray,
};
use xreg::harness::{paired_t_test, run_initialization_experiment, run_registration_experiment, ExperimentConfig, Mode, RunReport};
use xreg::pnp::{landmark_distance, solve_pnp, weights_from_errors, PnPConfig, PnPMode, MISSED_PENALTY};
use xreg::refine::{bone_surface, refine_with_surface, RefineConfig};
use xreg::register::{ncc, pose_from_params, register, RegistrationSchedule};
use xreg::rng;
use xreg::volume::{make_phantom, LANDMARK_COUNT};
use xreg::Execution;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let ph = make_phantom(1);
    let k = CameraIntrinsics::default();
    let spec = PoseSamplingSpec::default().with_count(1000);
    let poses = sample_pose_set(PoseSetLabel::S4, &spec, 101).unwrap();
    let pts: Vec<Vector3<f64>> = (0..LANDMARK_COUNT).map(|j| ph.landmarks.get(j).unwrap()).collect();
    let cfg = PnPConfig::default();
    let mut good = 0;
    let mut worst = (0.0f64, 0.0f64);
    let start = Instant::now();
    for gt in &poses.poses {
        let det = Detection2DSet::new(pts.iter().map(|m| Detection::found(project(gt, &k, m).unwrap(), 1.0)).collect()).unwrap();
        let Ok(res) = solve_pnp(&det, &ph.landmarks, &k, PnPMode::Unweighted, &cfg) else {
            continue;
        };
        let t = translation_error_mm(&res.pose, gt);
        let r = rotation_error_deg(&res.pose.rotation, &gt.rotation);
        worst = (worst.0.max(t), worst.1.max(r));
        if t < 0.1 && r < 0.01 {
            good += 1;
        }
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / poses.len() as f64;
    check(
        good as f64 >= 0.999 * poses.len() as f64 && ms < 10.0,
        format!(
            "{good}/{} exact (worst {:.2e} mm, {:.2e} deg), {ms:.2} ms/solve",
            poses.len(),
            worst.0,
            worst.1
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut g = rng::stream(2, &[]);
    let mut cases = 0;
    for _ in 0..1000 {
        let a = Vector2::new(g.random_range(-50.0..600.0), g.random_range(-50.0..600.0));
        let b = Vector2::new(g.random_range(-50.0..600.0), g.random_range(-50.0..600.0));
        for x in [None, Some(a)] {
            for y in [None, Some(b)] {
                let d = landmark_distance(x, y);
                let expected = match (x, y) {
                    (None, None) => 0.0,
                    (Some(p), Some(q)) => ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt(),
                    _ => 40.0,
                };
                if d != expected || d != landmark_distance(y, x) {
                    return Err(format!("d({x:?}, {y:?}) = {d}, expected {expected}"));
                }
                cases += 1;
            }
        }
    }
    check(MISSED_PENALTY == 40.0, format!("{cases} sentinel combinations exact and symmetric"))
}

fn criterion_3() -> Outcome {
    let mut g = rng::stream(3, &[]);
    let floor = PnPConfig::default().weight_floor;
    let (mut worst_mean, mut worst_std, mut worst_scale, mut fallback) = (0.0f64, 0.0f64, 0.0f64, 0);
    for trial in 0..1000 {
        let n = g.random_range(2..=LANDMARK_COUNT);
        let errors: Vec<f64> = (0..n)
            .map(|_| if g.random_bool(0.1) { 40.0 } else { g.random_range(0.01..15.0) })
            .collect();
        let mask = vec![true; n];
        let w: Vec<f64> = weights_from_errors(&errors, &mask, floor).unwrap().present().collect();
        let nf = w.len() as f64;
        let mean = w.iter().sum::<f64>() / nf;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf).sqrt();
        if w.iter().all(|&x| x == 1.0) {
            fallback += 1;
        } else {
            worst_mean = worst_mean.max((mean - 1.0).abs());
            worst_std = worst_std.max((std - 0.5).abs());
        }
        let c = 10f64.powf(g.random_range(-3.0..3.0));
        let scaled: Vec<f64> = errors.iter().map(|e| e * c).collect();
        let ws: Vec<f64> = weights_from_errors(&scaled, &mask, floor).unwrap().present().collect();
        for (a, b) in w.iter().zip(&ws) {
            worst_scale = worst_scale.max((a - b).abs());
        }
        if trial == 0 && w.len() != n {
            return Err("weight count differs from detection count".into());
        }
    }
    check(
        worst_mean < 1e-12 && worst_std < 1e-12 && worst_scale < 1e-12,
        format!("max |mean-1| {worst_mean:.1e}, max |std-0.5| {worst_std:.1e}, max scale drift {worst_scale:.1e}, {fallback} all-ones fallbacks"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig::from_json_str(
        r#"{"patient_seeds": [1, 2, 3, 4], "modes": ["UNWEIGHTED", "WEIGHTED", "GT_WEIGHTED"]}"#,
    )
    .unwrap();
    let rep = run_initialization_experiment(&cfg, Execution::default()).unwrap();
    let mut by_key: BTreeMap<(u64, usize), [Option<f64>; 3]> = BTreeMap::new();
    for r in &rep.rows {
        let slot = match r.mode {
            Mode::Unweighted => 0,
            Mode::Weighted => 1,
            Mode::GtWeighted => 2,
            _ => continue,
        };
        by_key.entry((r.patient, r.pose_id)).or_default()[slot] = r.translation_error_mm;
    }
    let triples: Vec<[f64; 3]> = by_key
        .values()
        .filter_map(|t| Some([t[0]?, t[1]?, t[2]?]))
        .collect();
    let col = |i: usize| triples.iter().map(|t| t[i]).collect::<Vec<_>>();
    let (u, w, gt) = (col(0), col(1), col(2));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mu, mw, mg) = (mean(&u), mean(&w), mean(&gt));
    let (_, p) = paired_t_test(&u, &gt);
    check(
        by_key.len() >= 200 && mg < mu && p < 0.01 && mg <= mw && mw <= mu,
        format!(
            "{} paired trials: UNWEIGHTED {mu:.2} mm, WEIGHTED {mw:.2} mm, GT_WEIGHTED {mg:.2} mm, p = {p:.2e}",
            triples.len()
        ),
    )
}

/// Least-squares ray intersection, independent of the clustering code.
fn triangulate_ls(rays: &[Ray]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for r in rays {
        let d = r.direction.normalize();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * r.origin;
    }
    a.lu().solve(&b).unwrap()
}

fn criterion_5() -> Outcome {
    let ph = make_phantom(5);
    let k = CameraIntrinsics::default();
    let surface = bone_surface(&ph.volume).unwrap();
    let s2 = sample_pose_set(PoseSetLabel::S2, &PoseSamplingSpec::default().with_count(20), 55).unwrap();
    let cfg = RefineConfig::default();
    let exact = DetectorModel::random(ph.landmarks.clone(), &DetectorParams::exact(), 1);
    let r = refine_with_surface(&surface, &exact, &s2, &k, &cfg, &DetectorConfig::REFINE, 9, Execution::default()).unwrap();
    let mut worst = 0.0f64;
    for (j, p) in r.cluster.resolved() {
        worst = worst.max((p - ph.landmarks.get(j).unwrap()).norm());
    }
    let on_surface = r.bone.resolved().all(|(_, p)| surface.contains(&p));

    let noisy_params = DetectorParams {
        sigma_px: [2.0, 2.0],
        view_penalty: 0.0,
        miss_scale: 0.0,
        ..DetectorParams::default()
    };
    let noisy = DetectorModel::random(ph.landmarks.clone(), &noisy_params, 1);
    let rn = refine_with_surface(&surface, &noisy, &s2, &k, &cfg, &DetectorConfig::REFINE, 9, Execution::default()).unwrap();
    let (mut ours, mut oracle) = (0.0, 0.0);
    for (j, p) in rn.cluster.resolved() {
        let m = ph.landmarks.get(j).unwrap();
        ours += (p - m).norm();
        oracle += (triangulate_ls(&rn.rays[j]) - m).norm();
    }
    let n = rn.cluster.resolved_count() as f64;
    check(
        r.cluster.resolved_count() == LANDMARK_COUNT && worst < 1e-6 && on_surface && ours <= 1.5 * oracle,
        format!(
            "zero-noise worst {worst:.1e} mm over {} landmarks, snapped on surface: {on_surface}; σ=2 px mean error {:.3} mm vs LS oracle {:.3} mm",
            r.cluster.resolved_count(),
            ours / n,
            oracle / n
        ),
    )
}

fn criterion_6() -> Outcome {
    let img = Image::new(32, 32, (0..1024).map(|i| ((i % 32) as f64 / 32.0 + (i / 32) as f64 / 64.0) * 0.8 + 0.1).collect());
    let cfg = AugmentConfig::default();
    let off = AugmentConfig {
        outer_gate_prob: 0.0,
        ..AugmentConfig::default()
    };
    let mut counts = [0usize; 9];
    let mut negatives = 0;
    let runs = 10_000;
    for seed in 0..runs {
        if seed < 200 {
            if augment(&img, &cfg, seed) != augment(&img, &cfg, seed) {
                return Err(format!("seed {seed} is not deterministic"));
            }
            if augment(&img, &off, seed) != img {
                return Err(format!("gate-off run {seed} changed the image"));
            }
        }
        let (_, trace) = augment_traced(&img, &cfg, seed, |_, im| {
            if im.data.iter().any(|&x| x < 0.0) {
                negatives += 1;
            }
        });
        for s in trace.applied {
            counts[Stage::ALL.iter().position(|&t| t == s).unwrap()] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / runs as f64).collect();
    let worst = freqs.iter().map(|f| (f - 0.25).abs()).fold(0.0, f64::max);
    check(
        negatives == 0 && worst <= 0.02,
        format!(
            "deterministic, identity when gated off, {negatives} negative stages, frequencies {}",
            freqs.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn criterion_7(rep: &RunReport, secs: f64) -> Outcome {
    let init = rep.mode(Mode::Weighted).ok_or("no WEIGHTED rows")?;
    let init_ok: BTreeMap<(u64, usize), bool> = rep
        .rows
        .iter()
        .filter(|r| r.mode == Mode::Weighted)
        .map(|r| ((r.patient, r.pose_id), r.success))
        .collect();
    let tre: Vec<f64> = rep
        .rows
        .iter()
        .filter(|r| r.mode == Mode::Registered && init_ok.get(&(r.patient, r.pose_id)) == Some(&true))
        .filter_map(|r| r.tre_mm)
        .collect();
    let tre_mean = tre.iter().sum::<f64>() / tre.len() as f64;
    let reg = rep.mode(Mode::Registered).ok_or("no REGISTERED rows")?;
    check(
        init.trials == 300 && init.success_rate >= 0.85 && tre_mean < 5.0 && secs < 1800.0,
        format!(
            "{} trials, initialization success {:.3}, registered success {:.3}, post-registration TRE {tre_mean:.2} mm over {} successes, {secs:.0} s",
            init.trials,
            init.success_rate,
            reg.success_rate,
            tre.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let a = Image::new(16, 12, (0..192).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect());
    let pos = Image::new(16, 12, a.data.iter().map(|x| 2.5 * x + 0.75).collect());
    let neg = Image::new(16, 12, a.data.iter().map(|x| 1.0 - 3.0 * x).collect());
    let ids = [
        (ncc(&a, &a).unwrap() - 1.0).abs(),
        (ncc(&a, &pos).unwrap() - 1.0).abs(),
        (ncc(&a, &neg).unwrap() + 1.0).abs(),
    ];
    let ids_ok = ids.iter().all(|&e| e <= 1e-12);

    // calibrated case: phantom seed 31, pose below
    let ph = make_phantom(31);
    let k = CameraIntrinsics::default().downsampled(8);
    let style = DrrStyle {
        step_mm: ph.volume.min_spacing(),
        ..DrrStyle::for_volume(DrrStyleId::EnergyNoLog, &ph.volume)
    };
    let gt = carm_pose(8.0, -6.0, 2.0, Vector3::new(3.0, 5.0, -4.0), 600.0);
    let target = render(&ph.volume, &gt, &k, &style).unwrap();
    let sched = RegistrationSchedule::default();
    let at_gt = register(&gt, &target, &ph.volume, &k, &style, &sched, Execution::default()).unwrap();
    let stay = translation_error_mm(&at_gt.pose, &gt);
    let mut worst = 0.0f64;
    for deg in [0.0f64, 90.0, 225.0] {
        let (s, c) = deg.to_radians().sin_cos();
        let start = pose_from_params(&gt, &[10.0 * c, 10.0 * s, 0.0, 0.0, 0.0, 0.0]);
        let r = register(&start, &target, &ph.volume, &k, &style, &sched, Execution::default()).unwrap();
        worst = worst.max(translation_error_mm(&r.pose, &gt));
    }
    check(
        ids_ok && stay < 1e-6 && worst < 1.0,
        format!(
            "NCC identity errors {:.1e}/{:.1e}/{:.1e}; start at GT moves {stay:.1e} mm; 10 mm in-plane offsets recovered to {worst:.3} mm (phantom 31)",
            ids[0], ids[1], ids[2]
        ),
    )
}

fn criterion_9(rep: &RunReport) -> Outcome {
    let m = rep.mode(Mode::Weighted).ok_or("no WEIGHTED rows")?;
    check(
        m.abs_ez_mean_mm > m.abs_ex_mean_mm && m.abs_ez_mean_mm > m.abs_ey_mean_mm,
        format!(
            "mean |ex| {:.2} mm, |ey| {:.2} mm, |ez| {:.2} mm (WEIGHTED initialization)",
            m.abs_ex_mean_mm, m.abs_ey_mean_mm, m.abs_ez_mean_mm
        ),
    )
}

fn criterion_10(first: &RunReport) -> Outcome {
    let again = run_registration_experiment(&ExperimentConfig::default(), Execution::default()).map_err(|e| e.to_string())?;
    let (a, b) = (first.rows_csv().unwrap(), again.rows_csv().unwrap());
    check(a == b, format!("{} bytes of report rows, identical: {}", a.len(), a == b))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("XREG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let r = f();
            let (tag, detail) = match &r {
                Ok(d) => ("PASS", d),
                Err(d) => ("FAIL", d),
            };
            println!("criterion {n:>2} {tag}  {name}: {detail}");
            results.push((n, name, r));
        }
    };
    run(1, "PnP exactness", &criterion_1);
    run(2, "landmark distance metric", &criterion_2);
    run(3, "weight construction", &criterion_3);
    run(4, "weighted PnP direction", &criterion_4);
    run(5, "refinement fidelity", &criterion_5);
    run(6, "augmentation", &criterion_6);
    run(8, "registration optimizer", &criterion_8);
    if wanted(7) || wanted(9) || wanted(10) {
        let start = Instant::now();
        let rep = run_registration_experiment(&ExperimentConfig::default(), Execution::default());
        let secs = start.elapsed().as_secs_f64();
        match rep {
            Ok(rep) => {
                run(7, "end-to-end benchmark", &|| criterion_7(&rep, secs));
                run(9, "error decomposition", &|| criterion_9(&rep));
                run(10, "reproducibility", &|| criterion_10(&rep));
            }
            Err(e) => {
                for (n, name) in [(7, "end-to-end benchmark"), (9, "error decomposition"), (10, "reproducibility")] {
                    run(n, name, &|| Err(format!("experiment failed: {e}")));
                }
            }
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
