//! Pinhole C-arm camera model, rigid poses and pose-error metrics.
//!
//! Conventions: a [`CameraPose`] maps a world point `x` to camera coordinates
//! `R x + t`; the camera looks along `+z`; pixel `(0, 0)` is the center of the
//! top-left pixel with `u` to the right and `v` downward. The world frame is
//! the CT frame with its origin at the volume center, which is also the
//! C-arm isocenter.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    PointBehindCamera(f64),
    #[error("landmark set is empty")]
    EmptyLandmarkSet,
    #[error("invalid pose sampling spec: {0}")]
    InvalidSpec(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Pinhole intrinsics of the virtual C-arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub image_size: [usize; 2],
    pub detector_width_mm: f64,
    pub source_detector_distance_mm: f64,
}

impl Default for CameraIntrinsics {
    /// 512 x 512 detector, 384 mm wide, 1200 mm source-detector distance.
    fn default() -> Self {
        Self::from_detector([512, 512], 384.0, 1200.0)
    }
}

impl CameraIntrinsics {
    /// Builds intrinsics whose focal length follows from the detector geometry.
    pub fn from_detector(
        image_size: [usize; 2],
        detector_width_mm: f64,
        source_detector_distance_mm: f64,
    ) -> Self {
        let pixel_mm = detector_width_mm / image_size[0] as f64;
        Self {
            focal_px: source_detector_distance_mm / pixel_mm,
            principal_point: [image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0],
            image_size,
            detector_width_mm,
            source_detector_distance_mm,
        }
    }

    pub fn width(&self) -> usize {
        self.image_size[0]
    }

    pub fn height(&self) -> usize {
        self.image_size[1]
    }

    /// Intrinsics of the same detector binned by an integer `factor`.
    pub fn downsampled(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        let f = factor as f64;
        let shift = (f - 1.0) / 2.0;
        Self {
            focal_px: self.focal_px / f,
            principal_point: [
                (self.principal_point[0] - shift) / f,
                (self.principal_point[1] - shift) / f,
            ],
            image_size: [self.image_size[0] / factor, self.image_size[1] / factor],
            detector_width_mm: self.detector_width_mm,
            source_detector_distance_mm: self.source_detector_distance_mm,
        }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.image_size[0] - 1) as f64
            && p.y <= (self.image_size[1] - 1) as f64
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// `{"R": 9 row-major numbers, "t": 3 numbers}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<CameraPose> for PoseJson {
    fn from(p: CameraPose) -> Self {
        let m = &p.rotation;
        PoseJson {
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseJson> for CameraPose {
    type Error = GeometryError;

    fn try_from(j: PoseJson) -> Result<Self, Self::Error> {
        let rotation = Matrix3::from_row_slice(&j.r);
        let pose = CameraPose {
            rotation,
            translation: Vector3::from(j.t),
        };
        pose.validate(1e-6)?;
        Ok(pose)
    }
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Pose with the given rotation and camera center.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self::new(rotation, -(rotation * center))
    }

    /// Camera center (X-ray source) in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Principal axis in world coordinates.
    pub fn view_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn validate(&self, tol: f64) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > tol {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > tol {
            return Err(GeometryError::InvalidPose("det(R) != 1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }
}

/// A backprojected ray from the X-ray source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, lambda: f64) -> Vector3<f64> {
        self.origin + self.direction * lambda
    }
}

pub fn project(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let c = pose.transform(point);
    if c.z <= 0.0 {
        return Err(GeometryError::PointBehindCamera(c.z));
    }
    Ok(Vector2::new(
        k.focal_px * c.x / c.z + k.principal_point[0],
        k.focal_px * c.y / c.z + k.principal_point[1],
    ))
}

pub fn backproject(pose: &CameraPose, k: &CameraIntrinsics, pixel: &Vector2<f64>) -> Ray {
    let d_cam = Vector3::new(
        (pixel.x - k.principal_point[0]) / k.focal_px,
        (pixel.y - k.principal_point[1]) / k.focal_px,
        1.0,
    );
    Ray::new(pose.center(), pose.rotation.transpose() * d_cam)
}

/// Rotation angle of a (near-)orthonormal matrix, in radians, in `[0, π]`.
pub fn rotation_angle(m: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm()
        / 2.0;
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c)
}

/// Magnitude of the axis-angle representation of `R_est · R_gtᵀ`, in degrees.
pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    rotation_angle(&(r_est * r_gt.transpose())).to_degrees()
}

/// Distance between the two camera centers.
pub fn translation_error_mm(est: &CameraPose, gt: &CameraPose) -> f64 {
    (est.center() - gt.center()).norm()
}

/// Camera-center difference expressed along the ground-truth camera axes.
pub fn translation_error_decomposed(est: &CameraPose, gt: &CameraPose) -> Vector3<f64> {
    gt.rotation * (est.center() - gt.center())
}

/// Target registration error: mean camera-frame displacement of `landmarks`.
pub fn tre_mm(
    est: &CameraPose,
    gt: &CameraPose,
    landmarks: &[Vector3<f64>],
) -> Result<f64, GeometryError> {
    if landmarks.is_empty() {
        return Err(GeometryError::EmptyLandmarkSet);
    }
    let sum: f64 = landmarks
        .iter()
        .map(|m| (est.transform(m) - gt.transform(m)).norm())
        .sum();
    Ok(sum / landmarks.len() as f64)
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).matrix()
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).matrix()
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).matrix()
}

/// Exponential map of an axis-angle vector (radians).
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*w).matrix()
}

/// Nearest rotation matrix (polar factor) of an arbitrary 3x3 matrix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoseSetLabel {
    S1,
    S2,
    S3,
    S4,
}

impl PoseSetLabel {
    pub fn tag(self) -> u64 {
        match self {
            PoseSetLabel::S1 => 1,
            PoseSetLabel::S2 => 2,
            PoseSetLabel::S3 => 3,
            PoseSetLabel::S4 => 4,
        }
    }
}

/// Uniform ranges for the C-arm movements. Angles in degrees, offsets in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSamplingSpec {
    pub count: usize,
    pub orbital_deg: [f64; 2],
    pub angulation_deg: [f64; 2],
    pub roll_deg: [f64; 2],
    pub offset_mm: [f64; 2],
    pub source_isocenter_mm: f64,
}

impl Default for PoseSamplingSpec {
    fn default() -> Self {
        Self {
            count: 20,
            orbital_deg: [-30.0, 30.0],
            angulation_deg: [-20.0, 20.0],
            roll_deg: [-5.0, 5.0],
            offset_mm: [-20.0, 20.0],
            source_isocenter_mm: 600.0,
        }
    }
}

impl PoseSamplingSpec {
    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.count == 0 {
            return Err(GeometryError::InvalidSpec("count must be >= 1".into()));
        }
        for (name, r) in [
            ("orbital_deg", self.orbital_deg),
            ("angulation_deg", self.angulation_deg),
            ("roll_deg", self.roll_deg),
            ("offset_mm", self.offset_mm),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(GeometryError::InvalidSpec(format!(
                    "{name} range [{}, {}] is empty",
                    r[0], r[1]
                )));
            }
        }
        if !(self.source_isocenter_mm > 0.0) {
            return Err(GeometryError::InvalidSpec(
                "source_isocenter_mm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub label: PoseSetLabel,
    pub seed: u64,
    pub poses: Vec<CameraPose>,
}

impl PoseSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// C-arm pose from orbital/angulation/roll angles (degrees) and an isocenter offset.
pub fn carm_pose(
    orbital_deg: f64,
    angulation_deg: f64,
    roll_deg: f64,
    offset: Vector3<f64>,
    source_isocenter_mm: f64,
) -> CameraPose {
    // camera-to-world rotation
    let q = rot_y(orbital_deg) * rot_x(angulation_deg) * rot_z(roll_deg);
    let center = q * Vector3::new(0.0, 0.0, -source_isocenter_mm) + offset;
    CameraPose::from_center(q.transpose(), center)
}

/// Samples a pose set; a pure function of `(label, spec, seed)`.
pub fn sample_pose_set(
    label: PoseSetLabel,
    spec: &PoseSamplingSpec,
    seed: u64,
) -> Result<PoseSet, GeometryError> {
    spec.validate()?;
    let poses = (0..spec.count)
        .map(|i| {
            let mut g = rng::stream(seed, &[rng::tag_str("pose-set"), label.tag(), i as u64]);
            let a = uniform(&mut g, spec.orbital_deg);
            let b = uniform(&mut g, spec.angulation_deg);
            let r = uniform(&mut g, spec.roll_deg);
            let off = Vector3::new(
                uniform(&mut g, spec.offset_mm),
                uniform(&mut g, spec.offset_mm),
                uniform(&mut g, spec.offset_mm),
            );
            carm_pose(a, b, r, off, spec.source_isocenter_mm)
        })
        .collect();
    Ok(PoseSet { label, seed, poses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ap() -> CameraPose {
        CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 600.0))
    }

    #[test]
    fn default_intrinsics_follow_detector_geometry() {
        let k = CameraIntrinsics::default();
        assert_eq!(k.image_size, [512, 512]);
        assert_relative_eq!(k.focal_px, 1600.0);
        assert_eq!(k.principal_point, [256.0, 256.0]);
        assert!(k.contains(&Vector2::new(k.principal_point[0], k.principal_point[1])));
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::default();
        let p = project(&ap(), &k, &Vector3::zeros()).unwrap();
        assert_relative_eq!(p, Vector2::new(256.0, 256.0));
        let p = project(&ap(), &k, &Vector3::new(37.5, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p, Vector2::new(356.0, 256.0), epsilon = 1e-12);
        assert!(matches!(
            project(&ap(), &k, &Vector3::new(0.0, 0.0, -700.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics::default();
        let r = backproject(&ap(), &k, &Vector2::new(256.0, 256.0));
        assert_relative_eq!(r.origin, Vector3::new(0.0, 0.0, -600.0));
        assert_relative_eq!(r.direction, Vector3::new(0.0, 0.0, 1.0));
        let r = backproject(&ap(), &k, &Vector2::new(356.0, 256.0));
        assert_relative_eq!(
            r.direction,
            Vector3::new(62.5, 0.0, 1000.0).normalize(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rotation_error_examples() {
        let i = Matrix3::identity();
        assert_eq!(rotation_error_deg(&i, &i), 0.0);
        assert_relative_eq!(rotation_error_deg(&rot_z(10.0), &i), 10.0, epsilon = 1e-12);
        // quaternion oracle: q = qx(5°) * qy(5°) has scalar part cos²(2.5°)
        let c = 2.5f64.to_radians().cos();
        let oracle = 2.0 * (c * c).acos().to_degrees();
        let got = rotation_error_deg(&(rot_x(5.0) * rot_y(5.0)), &i);
        assert_relative_eq!(got, oracle, epsilon = 1e-9);
        assert!((got - 7.06).abs() < 0.01);
    }

    #[test]
    fn translation_error_examples() {
        let a = ap();
        assert_eq!(translation_error_mm(&a, &a), 0.0);
        let b = CameraPose::new(a.rotation, a.translation + Vector3::new(3.0, 4.0, 0.0));
        assert_relative_eq!(translation_error_mm(&b, &a), 5.0);
        // same center, different orientation
        let c = CameraPose::from_center(rot_y(12.0), a.center());
        assert_relative_eq!(translation_error_mm(&c, &a), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn decomposition_examples() {
        let gt = carm_pose(20.0, -10.0, 3.0, Vector3::new(1.0, 2.0, 3.0), 600.0);
        assert_eq!(translation_error_decomposed(&gt, &gt), Vector3::zeros());
        let moved = CameraPose::from_center(gt.rotation, gt.center() + gt.view_axis() * 7.0);
        assert_relative_eq!(
            translation_error_decomposed(&moved, &gt),
            Vector3::new(0.0, 0.0, 7.0),
            epsilon = 1e-9
        );
    }

    #[test]
    fn tre_examples() {
        let a = ap();
        let lms = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-4.0, 0.5, 9.0)];
        assert_eq!(tre_mm(&a, &a, &lms).unwrap(), 0.0);
        let b = CameraPose::new(a.rotation, a.translation + Vector3::new(3.0, 0.0, 0.0));
        assert_relative_eq!(tre_mm(&b, &a, &lms).unwrap(), 3.0, epsilon = 1e-12);
        let m = Vector3::new(4.0, 3.0, 2.0);
        let c = CameraPose::new(rot_z(90.0), a.translation);
        assert_relative_eq!(
            tre_mm(&c, &a, &[m]).unwrap(),
            2f64.sqrt() * 5.0,
            epsilon = 1e-12
        );
        assert_eq!(tre_mm(&a, &a, &[]), Err(GeometryError::EmptyLandmarkSet));
    }

    #[test]
    fn pose_set_sampling() {
        let spec = PoseSamplingSpec::default();
        let a = sample_pose_set(PoseSetLabel::S2, &spec, 7).unwrap();
        let b = sample_pose_set(PoseSetLabel::S2, &spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let lim = 600.0 + 20.0 * 3f64.sqrt();
        for p in &a.poses {
            let d = p.center().norm();
            assert!(d <= lim && d >= 600.0 - 20.0 * 3f64.sqrt());
            p.validate(1e-9).unwrap();
        }
        let other = sample_pose_set(PoseSetLabel::S3, &spec, 7).unwrap();
        assert_ne!(a.poses[0], other.poses[0]);

        let zero = PoseSamplingSpec {
            count: 1,
            orbital_deg: [0.0, 0.0],
            angulation_deg: [0.0, 0.0],
            roll_deg: [0.0, 0.0],
            offset_mm: [0.0, 0.0],
            source_isocenter_mm: 600.0,
        };
        let p = sample_pose_set(PoseSetLabel::S1, &zero, 1).unwrap().poses[0];
        assert_relative_eq!(p.center(), Vector3::new(0.0, 0.0, -600.0), epsilon = 1e-12);
        assert_relative_eq!(p.rotation, Matrix3::identity(), epsilon = 1e-15);

        let bad = PoseSamplingSpec {
            orbital_deg: [5.0, -5.0],
            ..PoseSamplingSpec::default()
        };
        assert!(matches!(
            sample_pose_set(PoseSetLabel::S1, &bad, 1),
            Err(GeometryError::InvalidSpec(_))
        ));
        assert!(sample_pose_set(PoseSetLabel::S1, &spec.clone().with_count(0), 1).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = carm_pose(10.0, 5.0, -2.0, Vector3::new(3.0, -1.0, 2.0), 600.0);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"R\""));
        let q: CameraPose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        let bad = r#"{"R":[2,0,0,0,1,0,0,0,1],"t":[0,0,0]}"#;
        assert!(serde_json::from_str::<CameraPose>(bad).is_err());
    }

    #[test]
    fn downsampled_intrinsics_match_binned_pixels() {
        let k = CameraIntrinsics::default();
        let k4 = k.downsampled(4);
        let pose = carm_pose(12.0, -7.0, 1.0, Vector3::new(4.0, 0.0, -3.0), 600.0);
        let x = Vector3::new(30.0, -20.0, 10.0);
        let p = project(&pose, &k, &x).unwrap();
        let p4 = project(&pose, &k4, &x).unwrap();
        assert_relative_eq!((p.x - 1.5) / 4.0, p4.x, epsilon = 1e-9);
        assert_relative_eq!((p.y - 1.5) / 4.0, p4.y, epsilon = 1e-9);
    }

    #[test]
    fn round_trip_ten_thousand_pairs() {
        use rand::Rng;
        let k = CameraIntrinsics::default();
        let mut g = rng::stream(11, &[]);
        for _ in 0..10_000 {
            let pose = carm_pose(
                g.random_range(-40.0..40.0),
                g.random_range(-30.0..30.0),
                g.random_range(-10.0..10.0),
                Vector3::new(g.random_range(-30.0..30.0), g.random_range(-30.0..30.0), g.random_range(-30.0..30.0)),
                600.0,
            );
            let px = Vector2::new(g.random_range(0.0..512.0), g.random_range(0.0..512.0));
            let ray = backproject(&pose, &k, &px);
            let back = project(&pose, &k, &ray.at(g.random_range(50.0..1500.0))).unwrap();
            assert!((back - px).norm() < 1e-6);
        }
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (-40.0..40.0f64, -30.0..30.0f64, -10.0..10.0f64, -30.0..30.0f64, -30.0..30.0f64, -30.0..30.0f64)
            .prop_map(|(a, b, r, x, y, z)| carm_pose(a, b, r, Vector3::new(x, y, z), 600.0))
    }

    fn arb_rot() -> impl Strategy<Value = Matrix3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| exp_so3(&Vector3::new(a, b, c)))
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(pose in arb_pose(), u in 0.0..512.0f64, v in 0.0..512.0f64, lambda in 100.0..2000.0f64) {
            let k = CameraIntrinsics::default();
            let ray = backproject(&pose, &k, &Vector2::new(u, v));
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let p = project(&pose, &k, &ray.at(lambda)).unwrap();
            prop_assert!((p - Vector2::new(u, v)).norm() < 1e-6);
        }

        #[test]
        fn rotation_error_is_a_metric(a in arb_rot(), b in arb_rot(), c in arb_rot()) {
            let ab = rotation_error_deg(&a, &b);
            let ba = rotation_error_deg(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            let ac = rotation_error_deg(&a, &c);
            let cb = rotation_error_deg(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn decomposition_recomposes(a in arb_pose(), b in arb_pose()) {
            let d = translation_error_decomposed(&a, &b);
            prop_assert!((d.norm() - translation_error_mm(&a, &b)).abs() < 1e-9);
        }
    }
}
