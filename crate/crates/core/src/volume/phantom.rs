//! Procedural pelvis-like CT phantoms.
//!
//! Axes: `x` patient left, `y` inferior, `z` posterior (the canonical AP source
//! sits at `z = -600`). Bones are unions of ellipsoids, spheres and capsules
//! with a 3 mm cortical shell, a cancellous interior and dense cores in the
//! femoral heads. Soft tissue fills an elliptic cylinder; the rest is air.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::landmarks::{LandmarkProvenance, LandmarkSet3D, LANDMARK_COUNT};
use super::{bone_mask, surface_points, Volume};
use crate::geometry::rot_y;
use crate::{rng, Execution};

pub const PHANTOM_DIM: usize = 128;
pub const PHANTOM_SPACING_MM: f64 = 1.5;

const AIR_HU: f32 = -1000.0;
const SOFT_TISSUE_HU: f32 = 40.0;
const CANCELLOUS_HU: f32 = 250.0;
const DENSE_HU: f32 = 1200.0;
const CORTEX_MM: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    /// The annotated landmark set, every point a bone-surface voxel center.
    pub landmarks: LandmarkSet3D,
    pub patient_seed: u64,
}

#[derive(Debug, Clone)]
enum Shape {
    Ellipsoid {
        center: Vector3<f64>,
        radii: Vector3<f64>,
        /// world-to-local rotation
        frame: Matrix3<f64>,
    },
    Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
    },
}

impl Shape {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Ellipsoid {
                center,
                radii,
                frame,
            } => {
                let q = frame * (p - center);
                let k0 = q.component_div(radii).norm();
                let k1 = q.component_div(&radii.component_mul(radii)).norm();
                if k1 == 0.0 {
                    -radii.min()
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
            Shape::Capsule { a, b, radius } => {
                let ab = b - a;
                let h = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - a - ab * h).norm() - radius
            }
        }
    }
}

struct Bone {
    shape: Shape,
    cortical_hu: f32,
}

struct Anatomy {
    bones: Vec<Bone>,
    /// (center, radius) of dense cores
    cores: Vec<(Vector3<f64>, f64)>,
    body_radii: [f64; 2],
    landmarks: [Vector3<f64>; LANDMARK_COUNT],
}

fn ellipsoid(c: Vector3<f64>, r: Vector3<f64>, yaw_deg: f64) -> Shape {
    Shape::Ellipsoid {
        center: c,
        radii: r,
        frame: rot_y(yaw_deg).transpose(),
    }
}

fn sphere(c: Vector3<f64>, r: f64) -> Shape {
    ellipsoid(c, Vector3::repeat(r), 0.0)
}

fn capsule(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Shape {
    Shape::Capsule { a, b, radius }
}

fn anatomy(seed: u64) -> Anatomy {
    let mut g = rng::stream(seed, &[rng::tag_str("phantom")]);
    let mut jitter = || g.random_range(0.9..1.1);
    let axis = Vector3::new(jitter(), jitter(), jitter());
    let p = |x: f64, y: f64, z: f64| Vector3::new(x, y, z).component_mul(&axis);

    let mut shapes: Vec<Shape> = Vec::new();
    let mut cores = Vec::new();
    let l5 = p(0.0, -72.0, 18.0);
    shapes.push(ellipsoid(l5, Vector3::new(20.0, 11.0, 15.0) * jitter(), 0.0));
    let sacrum = p(0.0, -30.0, 38.0);
    shapes.push(ellipsoid(sacrum, Vector3::new(20.0, 30.0, 10.0) * jitter(), 0.0));

    let mut lm = [Vector3::zeros(); LANDMARK_COUNT];
    lm[0] = l5 + Vector3::new(0.0, 0.0, -16.0);
    lm[1] = l5 + Vector3::new(0.0, -12.0, 0.0);
    lm[2] = sacrum + Vector3::new(0.0, -28.0, -8.0);
    lm[3] = sacrum + Vector3::new(0.0, 31.0, 0.0);

    for (side, s) in [(0usize, 1.0f64), (1, -1.0)] {
        let wing = p(48.0 * s, -35.0, 18.0);
        shapes.push(ellipsoid(wing, Vector3::new(26.0, 30.0, 7.0) * jitter(), 35.0 * s));
        shapes.push(capsule(p(46.0 * s, -12.0, 14.0), p(50.0 * s, 14.0, -2.0), 10.0 * jitter()));
        let head = p(52.0 * s, 18.0, -4.0);
        let head_r = 14.0 * jitter();
        shapes.push(sphere(head, head_r));
        cores.push((head, 0.45 * head_r));
        shapes.push(capsule(head, p(70.0 * s, 34.0, -2.0), 8.0 * jitter()));
        shapes.push(capsule(p(72.0 * s, 32.0, -2.0), p(76.0 * s, 95.0, 2.0), 11.0 * jitter()));
        let gt = p(78.0 * s, 30.0, 2.0);
        let gt_r = 10.0 * jitter();
        shapes.push(sphere(gt, gt_r));
        let lt = p(64.0 * s, 46.0, 8.0);
        let lt_r = 6.0 * jitter();
        shapes.push(sphere(lt, lt_r));
        shapes.push(capsule(p(44.0 * s, 20.0, -14.0), p(10.0 * s, 32.0, -38.0), 6.0 * jitter()));
        shapes.push(capsule(p(10.0 * s, 38.0, -36.0), p(38.0 * s, 50.0, -4.0), 5.0 * jitter()));
        shapes.push(capsule(p(44.0 * s, 22.0, 4.0), p(38.0 * s, 56.0, 12.0), 8.0 * jitter()));

        lm[4 + side] = wing + Vector3::new(0.0, -32.0, 0.0);
        lm[6 + side] = p(64.0 * s, -20.0, -6.0);
        lm[8 + side] = p(26.0 * s, -30.0, 38.0);
        lm[10 + side] = head + Vector3::new(0.0, -head_r - 4.0, 0.0);
        lm[12 + side] = head + Vector3::new(0.0, 0.0, -head_r);
        lm[14 + side] = gt + Vector3::new(gt_r * s, 0.0, 0.0);
        lm[16 + side] = lt + Vector3::new(-0.7 * lt_r * s, 0.0, 0.7 * lt_r);
        lm[19 + side] = p(20.0 * s, 30.0, -38.0);
        lm[21 + side] = p(38.0 * s, 62.0, 12.0);
    }
    lm[18] = p(0.0, 32.0, -40.0);

    let bones = shapes
        .into_iter()
        .map(|shape| Bone {
            shape,
            cortical_hu: g.random_range(320.0..480.0) as f32,
        })
        .collect();
    Anatomy {
        bones,
        cores,
        body_radii: [92.0, 80.0],
        landmarks: lm,
    }
}

fn voxel_hu(a: &Anatomy, p: &Vector3<f64>) -> f32 {
    let [bx, bz] = a.body_radii;
    // skin edge blended over one voxel so grazing rays see a smooth profile
    let k0 = (p.x / bx).hypot(p.z / bz);
    let k1 = (p.x / (bx * bx)).hypot(p.z / (bz * bz));
    let skin = if k1 > 0.0 { k0 * (k0 - 1.0) / k1 } else { -bz };
    let inside = (0.5 - skin / PHANTOM_SPACING_MM).clamp(0.0, 1.0) as f32;
    if inside == 0.0 {
        return AIR_HU;
    }
    if inside < 1.0 {
        return AIR_HU + inside * (SOFT_TISSUE_HU - AIR_HU);
    }
    if a.cores.iter().any(|(c, r)| (p - c).norm() <= *r) {
        return DENSE_HU;
    }
    let mut best = f64::INFINITY;
    let mut hu = SOFT_TISSUE_HU;
    for b in &a.bones {
        let d = b.shape.sdf(p);
        if d < best {
            best = d;
            hu = b.cortical_hu;
        }
    }
    if best > 0.0 {
        SOFT_TISSUE_HU
    } else if best > -CORTEX_MM {
        hu
    } else {
        CANCELLOUS_HU
    }
}

/// Builds the 128³ phantom for `patient_seed`; a pure function of the seed.
pub fn make_phantom(patient_seed: u64) -> Phantom {
    make_phantom_with(patient_seed, Execution::default())
}

pub fn make_phantom_with(patient_seed: u64, exec: Execution) -> Phantom {
    let a = anatomy(patient_seed);
    let n = PHANTOM_DIM;
    let sp = PHANTOM_SPACING_MM;
    let origin = -(n as f64 - 1.0) * sp / 2.0;
    let mut values = vec![0f32; n * n * n];
    exec.for_each_chunk(&mut values, n * n, |k, slice| {
        let z = origin + k as f64 * sp;
        for j in 0..n {
            let y = origin + j as f64 * sp;
            for i in 0..n {
                let x = origin + i as f64 * sp;
                slice[i + n * j] = voxel_hu(&a, &Vector3::new(x, y, z));
            }
        }
    });
    let volume = Volume::centered([n; 3], [sp; 3], values).expect("phantom grid is valid");
    let mask = bone_mask(&volume, 200.0, 500.0).expect("valid band");
    let surface = surface_points(&mask).expect("phantom has bone");
    let snapped = a
        .landmarks
        .iter()
        .map(|m| surface.nearest(m).expect("non-empty surface"))
        .collect();
    Phantom {
        volume,
        landmarks: LandmarkSet3D::complete(LandmarkProvenance::Original, snapped),
        patient_seed,
    }
}
