use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered set of `dim`-dimensional points stored row-wise (`len × dim`).
///
/// Row order is stable: index `i` names the same point for the lifetime of
/// the value and across index-preserving operations such as
/// [`PointCloud::select`].
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T: Real> {
    points: DMatrix<T>,
}

impl<T: Real> PointCloud<T> {
    /// Wraps a `len × dim` matrix, rejecting non-finite coordinates.
    pub fn new(points: DMatrix<T>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::invalid("point dimension must be at least 1"));
        }
        if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite coordinate in point {}",
                bad % points.nrows().max(1)
            )));
        }
        Ok(Self { points })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            points: DMatrix::zeros(0, dim.max(1)),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyCloud("from_rows"));
        };
        let dim = first.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "point {i} has dimension {} but point 0 has {dim}",
                    row.len()
                )));
            }
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn from_points3(points: &[nalgebra::Vector3<T>]) -> Self {
        Self {
            points: DMatrix::from_fn(points.len(), 3, |i, j| points[i][j]),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.points
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.points
    }

    pub fn point(&self, i: usize) -> RowDVector<T> {
        self.points.row(i).into_owned()
    }

    /// Point `i` as a 3-vector. Panics if `dim != 3`.
    pub fn point3(&self, i: usize) -> nalgebra::Vector3<T> {
        assert_eq!(self.dim(), 3, "point3 requires a 3-dimensional cloud");
        nalgebra::Vector3::new(
            self.points[(i, 0)],
            self.points[(i, 1)],
            self.points[(i, 2)],
        )
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.len())
            .map(|i| self.points.row(i).iter().copied().collect())
            .collect()
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(indices.iter()),
        }
    }

    /// Concatenates two clouds of the same dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        ensure_same_dim(self.dim(), other.dim())?;
        let mut points = DMatrix::zeros(self.len() + other.len(), self.dim());
        points.rows_mut(0, self.len()).copy_from(&self.points);
        points
            .rows_mut(self.len(), other.len())
            .copy_from(&other.points);
        Ok(Self { points })
    }

    pub fn centroid(&self) -> Result<DVector<T>> {
        if self.is_empty() {
            return Err(Error::EmptyCloud("centroid"));
        }
        let n = T::from_usize_lossy(self.len());
        Ok(DVector::from_fn(self.dim(), |j, _| self.points.column(j).sum() / n))
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounding_box(&self) -> Result<(DVector<T>, DVector<T>)> {
        if self.is_empty() {
            return Err(Error::EmptyCloud("bounding_box"));
        }
        let lo = DVector::from_fn(self.dim(), |j, _| self.points.column(j).min());
        let hi = DVector::from_fn(self.dim(), |j, _| self.points.column(j).max());
        Ok((lo, hi))
    }

    /// Length of the bounding-box diagonal.
    pub fn diagonal(&self) -> Result<T> {
        let (lo, hi) = self.bounding_box()?;
        Ok((hi - lo).norm())
    }

    pub fn translated(&self, offset: &DVector<T>) -> Result<Self> {
        ensure_same_dim(self.dim(), offset.len())?;
        let mut points = self.points.clone();
        for mut row in points.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += offset[j];
            }
        }
        Ok(Self { points })
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            points: &self.points * factor,
        }
    }

    /// Converts to another scalar type through `f64`.
    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.map(|v| U::lit(v.to_f64_lossy())),
        }
    }

    /// Voxel-grid filter: one centroid per occupied cell of side `leaf`.
    ///
    /// Output order follows the lexicographic order of the integer cell
    /// coordinates, so the result is independent of input order.
    pub fn voxel_downsample(&self, leaf: T) -> Result<Self> {
        if !(leaf > T::zero()) || !leaf.is_finite() {
            return Err(Error::invalid(format!("voxel leaf must be positive, got {leaf}")));
        }
        let dim = self.dim();
        let mut cells: BTreeMap<Vec<i64>, (Vec<T>, usize)> = BTreeMap::new();
        for row in self.points.row_iter() {
            let key: Vec<i64> = row
                .iter()
                .map(|&v| (v / leaf).floor().to_f64_lossy() as i64)
                .collect();
            let entry = cells
                .entry(key)
                .or_insert_with(|| (vec![T::zero(); dim], 0));
            for (acc, &v) in entry.0.iter_mut().zip(row.iter()) {
                *acc += v;
            }
            entry.1 += 1;
        }
        let mut points = DMatrix::zeros(cells.len(), dim);
        for (i, (sum, count)) in cells.values().enumerate() {
            let n = T::from_usize_lossy(*count);
            for j in 0..dim {
                points[(i, j)] = sum[j] / n;
            }
        }
        Ok(Self { points })
    }
}

pub(crate) fn ensure_same_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `|a| × |b|` matrix of squared Euclidean distances.
pub fn pairwise_sq_distances<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<DMatrix<T>> {
    ensure_same_dim(a.dim(), b.dim())?;
    let (am, bm) = (a.matrix(), b.matrix());
    let dim = a.dim();
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let mut acc = T::zero();
        for k in 0..dim {
            let d = am[(i, k)] - bm[(j, k)];
            acc += d * d;
        }
        acc
    }))
}

/// Mean over `truth` points of the squared distance to the nearest
/// `deformed` point. Asymmetric: every ground-truth point must be explained.
pub fn chamfer_error<T: Real>(deformed: &PointCloud<T>, truth: &PointCloud<T>) -> Result<T> {
    if deformed.is_empty() {
        return Err(Error::EmptyCloud("chamfer_error: deformed"));
    }
    if truth.is_empty() {
        return Err(Error::EmptyCloud("chamfer_error: truth"));
    }
    ensure_same_dim(deformed.dim(), truth.dim())?;
    let (dm, tm) = (deformed.matrix(), truth.matrix());
    let dim = truth.dim();
    let mut total = T::zero();
    for n in 0..truth.len() {
        let mut best = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
        for m in 0..deformed.len() {
            let mut acc = T::zero();
            for k in 0..dim {
                let d = tm[(n, k)] - dm[(m, k)];
                acc += d * d;
            }
            if acc < best {
                best = acc;
            }
        }
        total += best;
    }
    Ok(total / T::from_usize_lossy(truth.len()))
}

/// For every point of `query`, the squared distance to its nearest point in `reference`.
pub fn nearest_sq_distances<T: Real>(query: &PointCloud<T>, reference: &PointCloud<T>) -> Result<Vec<T>> {
    if reference.is_empty() {
        return Err(Error::EmptyCloud("nearest_sq_distances: reference"));
    }
    let d = pairwise_sq_distances(query, reference)?;
    Ok(d.row_iter().map(|r| r.min()).collect())
}
