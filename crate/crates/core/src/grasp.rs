//! Transfer of grasp annotations from canonical coordinates to a fitted instance.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cpd::DeformationField;
use crate::error::{Error, Result};
use crate::geometry::cloud::PointCloud;
use crate::geometry::rigid::{Pose, PoseRecord, RigidTransform};
use crate::inference::{InferenceResult, LatentPose};
use crate::scalar::Real;

/// Frame scale for orientation warping, relative to the canonical diagonal.
pub const FRAME_SCALE: f64 = 0.01;

/// Relative singular-value cutoff below which a warped frame counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPose<T: Real> {
    pub label: String,
    pub pose: Pose<T>,
    /// Free-form metadata, passed through untouched.
    pub meta: BTreeMap<String, Value>,
}

/// Ordered, uniquely labelled control poses.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspAnnotation<T: Real> {
    poses: Vec<LabeledPose<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspPoseRecord {
    pub label: String,
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub orientation: [f64; 4],
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRecord {
    pub poses: Vec<GraspPoseRecord>,
}

impl<T: Real> GraspAnnotation<T> {
    pub fn new(poses: Vec<LabeledPose<T>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &poses {
            if !seen.insert(p.label.as_str()) {
                return Err(Error::invalid(format!("duplicate grasp label `{}`", p.label)));
            }
            let n = p.pose.orientation.quaternion().norm();
            if (n - T::one()).abs() > T::lit(1e-9) {
                return Err(Error::invalid(format!("orientation of `{}` is not unit-norm", p.label)));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[LabeledPose<T>] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Union of two annotations; labels must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        Self::new(self.poses.iter().chain(&other.poses).cloned().collect())
    }

    pub fn to_record(&self) -> GraspRecord {
        GraspRecord {
            poses: self
                .poses
                .iter()
                .map(|p| {
                    let r = p.pose.to_record();
                    GraspPoseRecord {
                        label: p.label.clone(),
                        position: r.position,
                        orientation: r.orientation,
                        meta: p.meta.clone(),
                    }
                })
                .collect(),
        }
    }

    /// Orientations are re-normalized on load; a zero quaternion is rejected.
    pub fn from_record(rec: &GraspRecord) -> Result<Self> {
        let poses = rec
            .poses
            .iter()
            .map(|p| {
                let pose = Pose::from_record(&PoseRecord {
                    position: p.position,
                    orientation: p.orientation,
                })?;
                Ok(LabeledPose {
                    label: p.label.clone(),
                    pose,
                    meta: p.meta.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(poses)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: GraspRecord = serde_json::from_str(text)?;
        Self::from_record(&rec)
    }
}

/// Annotation in instance coordinates plus the fit it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedGrasp<T: Real> {
    pub annotation: GraspAnnotation<T>,
    pub provenance: Option<LatentPose<T>>,
    /// Labels whose orientation fell back to the rigid-only rotation.
    pub rigid_fallbacks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpedGraspRecord {
    pub poses: Vec<GraspPoseRecord>,
    pub x: Option<Vec<f64>>,
    pub theta: Option<PoseRecord>,
    #[serde(default)]
    pub rigid_fallbacks: Vec<String>,
}

impl<T: Real> WarpedGrasp<T> {
    pub fn to_record(&self) -> WarpedGraspRecord {
        WarpedGraspRecord {
            poses: self.annotation.to_record().poses,
            x: self
                .provenance
                .as_ref()
                .map(|p| p.x.iter().map(|v| v.to_f64_lossy()).collect()),
            theta: self.provenance.as_ref().map(|p| p.theta.to_record()),
            rigid_fallbacks: self.rigid_fallbacks.clone(),
        }
    }
}

fn is_zero_field<T: Real>(field: &DeformationField<T>) -> bool {
    field.weights().iter().all(|w| *w == T::zero())
}

fn displace<T: Real>(field: &DeformationField<T>, p: &Vector3<T>) -> Result<Vector3<T>> {
    let z = PointCloud::new(DMatrix::from_row_slice(1, 3, p.as_slice()))?;
    let d = field.displacement(&z)?;
    Ok(p + Vector3::new(d[(0, 0)], d[(0, 1)], d[(0, 2)]))
}

/// `Θ(pos + G(C, pos) W)`.
pub fn warp_position<T: Real>(field: &DeformationField<T>, theta: &RigidTransform<T>, pos: &Vector3<T>) -> Result<Vector3<T>> {
    if field.template().dim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            actual: field.template().dim(),
        });
    }
    if is_zero_field(field) {
        return Ok(theta.apply_point(pos));
    }
    Ok(theta.apply_point(&displace(field, pos)?))
}

/// Nearest proper rotation to `f` (polar factor with determinant +1), or
/// `None` when `f` has numerical rank below 3.
pub fn nearest_rotation<T: Real>(f: &Matrix3<T>) -> Option<Matrix3<T>> {
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    let max = s.max();
    if !(max > T::zero()) || s.min() <= max * T::lit(RANK_TOLERANCE) {
        return None;
    }
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        // flip the axis of the smallest singular value
        let k = s.imin();
        let mut d = Matrix3::identity();
        d[(k, k)] = -T::one();
        r = u * d * v_t;
    }
    Some(r)
}

/// Warps the pose's local frame at offset `h`, projects it onto the nearest
/// rotation and composes with `theta`. Returns the orientation and whether
/// the rigid-only fallback was used.
pub fn warp_orientation<T: Real>(
    field: &DeformationField<T>,
    theta: &RigidTransform<T>,
    pose: &Pose<T>,
    h: T,
) -> Result<(UnitQuaternion<T>, bool)> {
    if !(h > T::zero()) {
        return Err(Error::invalid("frame scale must be positive"));
    }
    if is_zero_field(field) {
        return Ok((theta.rotation * pose.orientation, false));
    }
    let axes = pose.orientation.to_rotation_matrix().into_inner();
    let origin = displace(field, &pose.position)?;
    let mut frame = Matrix3::zeros();
    for c in 0..3 {
        let tip = displace(field, &(pose.position + axes.column(c) * h))?;
        frame.set_column(c, &((tip - origin) / h));
    }
    match nearest_rotation(&frame) {
        Some(r) => {
            let local = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
            let q = theta.rotation * local;
            Ok((UnitQuaternion::new_normalize(q.into_inner()), false))
        }
        None => Ok((theta.rotation * pose.orientation, true)),
    }
}

/// Warps every pose through `field` and `theta`, preserving order and metadata.
pub fn warp_annotation<T: Real>(
    annotation: &GraspAnnotation<T>,
    field: &DeformationField<T>,
    theta: &RigidTransform<T>,
) -> Result<WarpedGrasp<T>> {
    let h = field.template().diagonal()? * T::lit(FRAME_SCALE);
    let mut fallbacks = Vec::new();
    let poses = annotation
        .poses
        .iter()
        .map(|p| {
            let position = warp_position(field, theta, &p.pose.position)?;
            let (orientation, fallback) = warp_orientation(field, theta, &p.pose, h)?;
            if fallback {
                warn!("degenerate warped frame for `{}`, using rigid rotation", p.label);
                fallbacks.push(p.label.clone());
            }
            Ok(LabeledPose {
                label: p.label.clone(),
                pose: Pose::new(position, orientation),
                meta: p.meta.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WarpedGrasp {
        annotation: GraspAnnotation { poses },
        provenance: None,
        rigid_fallbacks: fallbacks,
    })
}

/// Warps an annotation onto the instance described by an inference result.
pub fn warp_grasp<T: Real>(annotation: &GraspAnnotation<T>, result: &InferenceResult<T>) -> Result<WarpedGrasp<T>> {
    let mut warped = warp_annotation(annotation, &result.field, &result.pose.theta)?;
    warped.provenance = Some(result.pose.clone());
    Ok(warped)
}
