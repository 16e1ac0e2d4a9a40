//! Perturbations used by the robustness protocol: i.i.d. Gaussian noise,
//! random rigid misalignment and single-view self-occlusion.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cloud::{ensure_same_dim, pairwise_sq_distances, PointCloud};
use super::rigid::RigidTransform;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Translation magnitudes of the misalignment protocol (model units).
pub const PROTOCOL_TRANSLATION_FACTORS: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

/// Rotation angles of the misalignment protocol, listed as published
/// (π/4 occurs twice).
pub const PROTOCOL_ROTATION_ANGLES: [f64; 5] = [
    std::f64::consts::FRAC_PI_4,
    std::f64::consts::FRAC_PI_8,
    3.0 * std::f64::consts::PI / 16.0,
    std::f64::consts::FRAC_PI_4,
    3.0 * std::f64::consts::PI / 8.0,
];

/// Points whose normal is within this angle of the view direction are visible.
pub const VISIBILITY_HALF_ANGLE_DEG: f64 = 95.0;

const NORMAL_NEIGHBORS: usize = 12;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Displaces every point by `factor` times an independent standard-normal vector.
pub fn add_noise<T: Real>(cloud: &PointCloud<T>, factor: T, seed: u64) -> Result<PointCloud<T>> {
    if !(factor >= T::zero()) {
        return Err(Error::invalid(format!("noise factor must be non-negative, got {factor}")));
    }
    if factor == T::zero() {
        return Ok(cloud.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut points = cloud.matrix().clone();
    // row-major draw order keeps results independent of storage layout
    for i in 0..points.nrows() {
        for j in 0..points.ncols() {
            let z: f64 = StandardNormal.sample(&mut rng);
            points[(i, j)] += factor * T::lit(z);
        }
    }
    PointCloud::new(points)
}

/// Uniform random direction on the unit sphere.
pub fn random_unit_vector<T: Real>(rng: &mut ChaCha8Rng) -> Vector3<T> {
    loop {
        let v = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(&mut *rng));
        let n = v.norm();
        if n > 1e-12 {
            return (v / n).map(T::lit);
        }
    }
}

/// Random rigid misalignment: translation of norm `translation_factor` along a
/// uniform direction, rotation of `angle` radians about a uniform axis.
pub fn sample_misalignment<T: Real>(translation_factor: T, angle: T, seed: u64) -> RigidTransform<T> {
    let mut rng = rng_from_seed(seed);
    let dir: Vector3<T> = random_unit_vector(&mut rng);
    let axis: Vector3<T> = random_unit_vector(&mut rng);
    RigidTransform::from_axis_angle(&axis, angle, dir * translation_factor)
        .expect("unit axis is non-zero")
}

/// True when `(factor, angle)` both appear in the protocol lists.
pub fn is_protocol_misalignment(factor: f64, angle: f64) -> bool {
    PROTOCOL_TRANSLATION_FACTORS.iter().any(|f| (f - factor).abs() < 1e-12)
        && PROTOCOL_ROTATION_ANGLES.iter().any(|a| (a - angle).abs() < 1e-12)
}

/// Outward unit normals from local PCA over the `k` nearest neighbours,
/// oriented away from the cloud centroid.
///
/// Normals with no clear outward sense (the point lies in the tangent plane
/// through the centroid, as for a flat cloud) are returned unoriented and
/// flagged `false` in the second vector.
pub fn estimate_normals<T: Real>(cloud: &PointCloud<T>, k: usize) -> Result<(DMatrix<T>, Vec<bool>)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("estimate_normals"));
    }
    let n = cloud.len();
    let dim = cloud.dim();
    let k = k.clamp(1, n);
    let centroid = cloud.centroid()?;
    let scale = cloud.diagonal()?.max(T::lit(1e-300));
    let dist = pairwise_sq_distances(cloud, cloud)?;
    let m = cloud.matrix();
    let mut normals = DMatrix::zeros(n, dim);
    let mut oriented = vec![true; n];
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n {
        order.sort_by(|&a, &b| {
            dist[(i, a)]
                .partial_cmp(&dist[(i, b)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let hood = &order[..k];
        let kk = T::from_usize_lossy(k);
        let mean = DVector::from_fn(dim, |j, _| hood.iter().map(|&h| m[(h, j)]).fold(T::zero(), |a, b| a + b) / kk);
        let mut cov = DMatrix::zeros(dim, dim);
        for &h in hood {
            let d = DVector::from_fn(dim, |j, _| m[(h, j)] - mean[j]);
            cov += &d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let smallest = eig.eigenvalues.imin();
        let mut normal: DVector<T> = eig.eigenvectors.column(smallest).into_owned();
        let nn = normal.norm();
        if nn > T::zero() {
            normal /= nn;
        }
        let outward = DVector::from_fn(dim, |j, _| m[(i, j)] - centroid[j]);
        let side = outward.dot(&normal);
        if side.abs() <= T::lit(1e-6) * scale {
            oriented[i] = false;
        } else if side < T::zero() {
            normal = -normal;
        }
        normals.row_mut(i).copy_from(&normal.transpose());
    }
    Ok((normals, oriented))
}

/// Subset of a cloud visible from one direction, with the kept indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialView<T: Real> {
    pub cloud: PointCloud<T>,
    pub indices: Vec<usize>,
}

impl<T: Real> PartialView<T> {
    /// Indices of `0..total` that were culled.
    pub fn hidden_indices(&self, total: usize) -> Vec<usize> {
        let mut keep = vec![false; total];
        for &i in &self.indices {
            keep[i] = true;
        }
        (0..total).filter(|&i| !keep[i]).collect()
    }
}

/// Self-occlusion by view-direction culling: a point survives iff its
/// outward normal lies within [`VISIBILITY_HALF_ANGLE_DEG`] of the direction
/// pointing at the viewer. `view_direction` points from the object to the
/// viewer and need not be normalized.
pub fn partial_view<T: Real>(cloud: &PointCloud<T>, view_direction: &DVector<T>) -> Result<PartialView<T>> {
    ensure_same_dim(cloud.dim(), view_direction.len())?;
    let norm = view_direction.norm();
    if !(norm > T::zero()) {
        return Err(Error::invalid("view direction must be non-zero"));
    }
    let dir = view_direction / norm;
    let (normals, oriented) = estimate_normals(cloud, NORMAL_NEIGHBORS)?;
    let threshold = T::lit(VISIBILITY_HALF_ANGLE_DEG.to_radians().cos());
    let indices: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let c = normals.row(i).transpose().dot(&dir);
            // unoriented normals take whichever sense faces the viewer
            let c = if oriented[i] { c } else { c.abs() };
            c >= threshold
        })
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyView);
    }
    Ok(PartialView {
        cloud: cloud.select(&indices),
        indices,
    })
}

/// `count` view directions spread over the sphere by a golden-angle spiral,
/// rotated by a seeded random offset.
pub fn view_directions<T: Real>(count: usize, seed: u64) -> Vec<DVector<T>> {
    let mut rng = rng_from_seed(seed);
    let offset: Vector3<f64> = random_unit_vector(&mut rng);
    let spin = super::rigid::rotation_from_vector(&(offset * std::f64::consts::PI));
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let v = spin * Vector3::new(r * phi.cos(), r * phi.sin(), z);
            DVector::from_iterator(3, v.iter().map(|&c| T::lit(c)))
        })
        .collect()
}
