//! CT voxel volumes, bone masks and bone-surface queries.

mod io;
pub mod landmarks;
mod phantom;

use nalgebra::Vector3;
use thiserror::Error;

pub use io::{VolumeDtype, VolumeHeader};
pub use landmarks::{LandmarkProvenance, LandmarkSet3D, LANDMARK_COUNT, LANDMARK_NAMES};
pub use phantom::{make_phantom, Phantom};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("bone mask is empty")]
    EmptyMask,
    #[error("surface point set is empty")]
    EmptySurface,
    #[error("invalid threshold band [{0}, {1}]")]
    InvalidThreshold(f64, f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// Voxel grid of Hounsfield units, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vector3<f64>,
    values: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vector3<f64>,
        values: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d < 8) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} below 8")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?}")));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(VolumeError::Invalid(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("non-finite voxel value".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
        })
    }

    /// Volume whose center lies at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self, VolumeError> {
        let origin = Vector3::new(
            -(dims[0] as f64 - 1.0) * spacing[0] / 2.0,
            -(dims[1] as f64 - 1.0) * spacing[1] / 2.0,
            -(dims[2] as f64 - 1.0) * spacing[2] / 2.0,
        );
        Self::new(dims, spacing, origin, values)
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], hu: f32) -> Result<Self, VolumeError> {
        Self::centered(dims, spacing, vec![hu; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, hu: f32) {
        let idx = self.index(i, j, k);
        self.values[idx] = hu;
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        voxel_center(self.origin, self.spacing, [i, j, k])
    }

    /// World bounding box of the voxel centers.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let hi = self.origin
            + Vector3::new(
                (self.dims[0] - 1) as f64 * self.spacing[0],
                (self.dims[1] - 1) as f64 * self.spacing[1],
                (self.dims[2] - 1) as f64 * self.spacing[2],
            );
        (self.origin, hi)
    }

    /// Trilinear interpolation at continuous voxel coordinates. Coordinates must
    /// lie within `[0, dim - 1]` on every axis (clamped otherwise).
    #[inline]
    pub fn trilinear_voxel(&self, x: f64, y: f64, z: f64) -> f64 {
        let [nx, ny, nz] = self.dims;
        let x = x.clamp(0.0, (nx - 1) as f64);
        let y = y.clamp(0.0, (ny - 1) as f64);
        let z = z.clamp(0.0, (nz - 1) as f64);
        let i = (x as usize).min(nx - 2);
        let j = (y as usize).min(ny - 2);
        let k = (z as usize).min(nz - 2);
        let fx = x - i as f64;
        let fy = y - j as f64;
        let fz = z - k as f64;
        let base = self.index(i, j, k);
        let sy = nx;
        let sz = nx * ny;
        let v = &self.values;
        let c00 = v[base] as f64 * (1.0 - fx) + v[base + 1] as f64 * fx;
        let c10 = v[base + sy] as f64 * (1.0 - fx) + v[base + sy + 1] as f64 * fx;
        let c01 = v[base + sz] as f64 * (1.0 - fx) + v[base + sz + 1] as f64 * fx;
        let c11 = v[base + sy + sz] as f64 * (1.0 - fx) + v[base + sy + sz + 1] as f64 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Trilinear HU at a world point, `None` outside the voxel-center box.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<f64> {
        let q = (p - self.origin).component_div(&Vector3::from(self.spacing));
        let inside = (0..3).all(|a| q[a] >= 0.0 && q[a] <= (self.dims[a] - 1) as f64);
        inside.then(|| self.trilinear_voxel(q.x, q.y, q.z))
    }
}

fn voxel_center(origin: Vector3<f64>, spacing: [f64; 3], ijk: [usize; 3]) -> Vector3<f64> {
    origin
        + Vector3::new(
            ijk[0] as f64 * spacing[0],
            ijk[1] as f64 * spacing[1],
            ijk[2] as f64 * spacing[2],
        )
}

/// One bit per voxel: set iff the HU lies in the threshold band.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Vector3<f64>,
    pub bits: Vec<bool>,
}

impl BoneMask {
    pub fn from_bits(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vector3<f64>,
        bits: Vec<bool>,
    ) -> Self {
        assert_eq!(bits.len(), dims[0] * dims[1] * dims[2]);
        Self {
            dims,
            spacing,
            origin,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set voxel with at least one six-connected unset or out-of-bounds neighbor.
    pub fn is_boundary(&self, i: usize, j: usize, k: usize) -> bool {
        if !self.get(i, j, k) {
            return false;
        }
        let [nx, ny, nz] = self.dims;
        i == 0
            || j == 0
            || k == 0
            || i + 1 == nx
            || j + 1 == ny
            || k + 1 == nz
            || !self.get(i - 1, j, k)
            || !self.get(i + 1, j, k)
            || !self.get(i, j - 1, k)
            || !self.get(i, j + 1, k)
            || !self.get(i, j, k - 1)
            || !self.get(i, j, k + 1)
    }
}

/// Inclusive HU band threshold. The default band is `[200, 500]`.
pub fn bone_mask(v: &Volume, hu_lo: f64, hu_hi: f64) -> Result<BoneMask, VolumeError> {
    if !(hu_lo < hu_hi) {
        return Err(VolumeError::InvalidThreshold(hu_lo, hu_hi));
    }
    let bits = v
        .values
        .iter()
        .map(|&h| (h as f64) >= hu_lo && (h as f64) <= hu_hi)
        .collect();
    Ok(BoneMask::from_bits(v.dims, v.spacing, v.origin, bits))
}

/// Boundary voxel centers of a bone mask, with a bucket grid for
/// exact nearest-point queries.
#[derive(Debug, Clone)]
pub struct SurfacePointSet {
    points: Vec<Vector3<f64>>,
    grid: BucketGrid,
}

impl PartialEq for SurfacePointSet {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

pub fn surface_points(mask: &BoneMask) -> Result<SurfacePointSet, VolumeError> {
    let [nx, ny, nz] = mask.dims;
    let mut pts = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask.is_boundary(i, j, k) {
                    pts.push(voxel_center(mask.origin, mask.spacing, [i, j, k]));
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(VolumeError::EmptyMask);
    }
    SurfacePointSet::new(pts)
}

impl SurfacePointSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, VolumeError> {
        if points.is_empty() {
            return Err(VolumeError::EmptySurface);
        }
        let grid = BucketGrid::build(&points);
        Ok(Self { points, grid })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.nearest(p).map(|q| q == *p).unwrap_or(false)
    }

    /// Closest surface point; equidistant candidates resolve to the
    /// lexicographically smallest `(x, y, z)`.
    pub fn nearest(&self, p: &Vector3<f64>) -> Result<Vector3<f64>, VolumeError> {
        self.grid
            .nearest(&self.points, p)
            .map(|i| self.points[i])
            .ok_or(VolumeError::EmptySurface)
    }
}

/// Alias matching the sphere-growing projection onto the bone surface.
pub fn nearest_surface_point(
    p: &Vector3<f64>,
    surface: &SurfacePointSet,
) -> Result<Vector3<f64>, VolumeError> {
    surface.nearest(p)
}

/// `a` ranks before `b` as a nearest-point candidate.
#[inline]
fn better(d_a: f64, a: &Vector3<f64>, d_b: f64, b: &Vector3<f64>) -> bool {
    if d_a != d_b {
        return d_a < d_b;
    }
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

#[derive(Debug, Clone)]
struct BucketGrid {
    lo: Vector3<f64>,
    cell: f64,
    n: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl BucketGrid {
    fn build(points: &[Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let volume = (extent.x.max(1e-9)) * (extent.y.max(1e-9)) * (extent.z.max(1e-9));
        // aim for roughly 8 points per bucket
        let cell = (volume * 8.0 / points.len() as f64)
            .cbrt()
            .max(extent.max() / 256.0)
            .max(1e-6);
        let n = [
            (extent.x / cell) as usize + 1,
            (extent.y / cell) as usize + 1,
            (extent.z / cell) as usize + 1,
        ];
        let mut grid = Self {
            lo,
            cell,
            n,
            starts: vec![0; n[0] * n[1] * n[2] + 1],
            items: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.bucket_of(p)).collect();
        for &b in &ids {
            grid.starts[b + 1] += 1;
        }
        for b in 0..grid.starts.len() - 1 {
            grid.starts[b + 1] += grid.starts[b];
        }
        let mut fill = grid.starts.clone();
        for (i, &b) in ids.iter().enumerate() {
            grid.items[fill[b]] = i;
            fill[b] += 1;
        }
        grid
    }

    fn cell_coords(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.lo[a]) / self.cell).floor();
            c[a] = if f <= 0.0 { 0 } else { (f as usize).min(self.n[a] - 1) };
        }
        c
    }

    fn bucket_of(&self, p: &Vector3<f64>) -> usize {
        let c = self.cell_coords(p);
        c[0] + self.n[0] * (c[1] + self.n[1] * c[2])
    }

    fn cell_box_distance(&self, c: [usize; 3], p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = self.lo[a] + c[a] as f64 * self.cell;
            let hi = lo + self.cell;
            let d = if p[a] < lo {
                lo - p[a]
            } else if p[a] > hi {
                p[a] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2.sqrt()
    }

    fn nearest(&self, points: &[Vector3<f64>], p: &Vector3<f64>) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        let c = self.cell_coords(p);
        let slack = self.cell_box_distance(c, p);
        let max_ring = self.n.iter().max().copied().unwrap_or(1);
        let mut best: Option<(f64, usize)> = None;
        for r in 0..=max_ring {
            if let Some((bd, _)) = best {
                // every point in ring r is at least (r - 1) cells from the center cell
                let lower = (r as f64 - 1.0) * self.cell - slack;
                if lower > bd {
                    break;
                }
            }
            self.visit_ring(c, r, |b| {
                for &idx in &self.items[self.starts[b]..self.starts[b + 1]] {
                    let d = (points[idx] - p).norm();
                    match best {
                        Some((bd, bi)) if !better(d, &points[idx], bd, &points[bi]) => {}
                        _ => best = Some((d, idx)),
                    }
                }
            });
        }
        best.map(|(_, i)| i)
    }

    fn visit_ring(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let lo = |a: usize| (c[a] as isize - r).max(0);
        let hi = |a: usize| (c[a] as isize + r).min(self.n[a] as isize - 1);
        for k in lo(2)..=hi(2) {
            for j in lo(1)..=hi(1) {
                for i in lo(0)..=hi(0) {
                    let ring = (i - c[0] as isize)
                        .abs()
                        .max((j - c[1] as isize).abs())
                        .max((k - c[2] as isize).abs());
                    if ring == r {
                        f(i as usize + self.n[0] * (j as usize + self.n[1] * k as usize));
                    }
                }
            }
        }
    }
}
