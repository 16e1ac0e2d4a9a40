//! Category-level non-rigid registration: CPD deformation fields, a latent
//! shape space learned from them, shape inference from partial views and
//! grasp transfer.
//!
//! Everything numeric is generic over [`Real`] (`f64` or `f32`); the
//! aliases below fix the common `f64` and `f32` instantiations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cpd;
pub mod error;
pub mod geometry;
pub mod grasp;
pub mod inference;
pub mod scalar;
pub mod shape_space;

pub use error::{Error, Result};
pub use scalar::Real;

pub type PointCloudF64 = geometry::PointCloud<f64>;
pub type PointCloudF32 = geometry::PointCloud<f32>;
pub type RigidTransformF64 = geometry::RigidTransform<f64>;
pub type RigidTransformF32 = geometry::RigidTransform<f32>;
pub type DeformationFieldF64 = cpd::DeformationField<f64>;
pub type DeformationFieldF32 = cpd::DeformationField<f32>;
pub type CategoryModelF64 = shape_space::CategoryModel<f64>;
pub type CategoryModelF32 = shape_space::CategoryModel<f32>;
pub type LatentPoseF64 = inference::LatentPose<f64>;
pub type LatentPoseF32 = inference::LatentPose<f32>;
pub type LatentShapeModelF64 = inference::LatentShapeModel<f64>;
pub type LatentShapeModelF32 = inference::LatentShapeModel<f32>;
pub type InferenceResultF64 = inference::InferenceResult<f64>;
pub type InferenceResultF32 = inference::InferenceResult<f32>;
pub type GraspAnnotationF64 = grasp::GraspAnnotation<f64>;
pub type GraspAnnotationF32 = grasp::GraspAnnotation<f32>;
