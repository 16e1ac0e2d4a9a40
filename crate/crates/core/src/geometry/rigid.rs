use nalgebra::{DMatrix, Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rotation (unit quaternion) followed by translation, in 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, translation: Vector3<T>) -> Result<Self> {
        let axis = Unit::try_new(*axis, T::zero())
            .ok_or_else(|| Error::invalid("rotation axis must be non-zero"))?;
        Ok(Self::new(
            UnitQuaternion::from_axis_angle(&axis, angle),
            translation,
        ))
    }

    /// Builds from `[w, x, y, z, tx, ty, tz]`, normalizing the quaternion
    /// unless it is already unit to machine precision (keeps round trips exact).
    pub fn from_params(params: &[T; 7]) -> Result<Self> {
        let q = Quaternion::new(params[0], params[1], params[2], params[3]);
        let norm = q.norm();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::invalid("zero or non-finite quaternion"));
        }
        let unit = if (norm - T::one()).abs() <= T::lit(4.0) * T::default_epsilon() {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self::new(
            unit,
            Vector3::new(params[4], params[5], params[6]),
        ))
    }

    pub fn params(&self) -> [T; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t[0], t[1], t[2]]
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> T {
        self.rotation.angle()
    }

    pub fn apply_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    pub fn apply_pose(&self, pose: &Pose<T>) -> Pose<T> {
        Pose::new(self.apply_point(&pose.position), self.rotation * pose.orientation)
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let p = self.params();
        let c = p.map(|v| U::lit(v.to_f64_lossy()));
        RigidTransform::from_params(&c).expect("unit quaternion stays non-zero under cast")
    }

    pub fn to_record(&self) -> PoseRecord {
        let p = self.params().map(|v| v.to_f64_lossy());
        PoseRecord {
            position: [p[4], p[5], p[6]],
            orientation: [p[0], p[1], p[2], p[3]],
        }
    }

    pub fn from_record(rec: &PoseRecord) -> Result<Self> {
        let o = rec.orientation;
        let t = rec.position;
        Self::from_params(&[o[0], o[1], o[2], o[3], t[0], t[1], t[2]].map(T::lit))
    }
}

/// Rotates then translates every point. Pairwise distances are preserved.
pub fn apply_rigid<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> Result<PointCloud<T>> {
    super::cloud::ensure_same_dim(3, cloud.dim())?;
    let r = t.rotation_matrix();
    let m = cloud.matrix();
    let mut out = DMatrix::zeros(cloud.len(), 3);
    for i in 0..cloud.len() {
        let p = Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]);
        let q = r * p + t.translation;
        for j in 0..3 {
            out[(i, j)] = q[j];
        }
    }
    PointCloud::new(out)
}

/// Position plus orientation in the coordinate system of a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub position: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vector3<T>, orientation: UnitQuaternion<T>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn to_record(&self) -> PoseRecord {
        let q = self.orientation.quaternion();
        PoseRecord {
            position: [
                self.position[0].to_f64_lossy(),
                self.position[1].to_f64_lossy(),
                self.position[2].to_f64_lossy(),
            ],
            orientation: [q.w, q.i, q.j, q.k].map(|v| v.to_f64_lossy()),
        }
    }

    pub fn from_record(rec: &PoseRecord) -> Result<Self> {
        let t = RigidTransform::<T>::from_record(rec)?;
        Ok(Self::new(t.translation, t.rotation))
    }
}

/// JSON form shared by poses and rigid transforms; quaternion is `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

/// Exponential map of a rotation vector (axis · angle).
pub fn rotation_from_vector<T: Real>(v: &Vector3<T>) -> UnitQuaternion<T> {
    UnitQuaternion::from_scaled_axis(*v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_leaves_points() {
        let c = PointCloud::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(apply_rigid(&c, &RigidTransform::identity()).unwrap(), c);
    }

    #[test]
    fn pure_translation() {
        let c = PointCloud::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let t = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(apply_rigid(&c, &t).unwrap().to_rows(), vec![vec![0.1, 0.0, 0.0]]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::zeros()).unwrap();
        // oracle: explicit rotation matrix from the quaternion components
        let q = t.rotation.quaternion();
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let r = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
        );
        let expected = r * Vector3::new(1.0, 0.0, 0.0);
        let got = t.apply_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((got - expected).norm() < 1e-12);
        assert!((got - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform::<f64>::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.7, Vector3::new(0.3, -0.2, 1.0))
            .unwrap();
        let id = t.compose(&t.inverse());
        assert!(id.translation.norm() < 1e-9);
        assert!(id.angle() < 1e-9);
        assert!((t.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn record_round_trip() {
        let t = RigidTransform::from_axis_angle(&Vector3::x(), 0.3, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let back = RigidTransform::<f64>::from_record(&t.to_record()).unwrap();
        assert!((back.translation - t.translation).norm() < 1e-15);
        assert!(back.rotation.angle_to(&t.rotation) < 1e-12);
    }
}
