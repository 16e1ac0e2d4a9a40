mod common;

use std::collections::BTreeMap;

use cls_core::bench::leaf_for_count;
use cls_core::cpd::{cpd_register, CpdConfig};
use cls_core::geometry::synth::{generate_instance, CategorySpec};
use cls_core::geometry::{apply_rigid, Pose, RigidTransform};
use cls_core::grasp::{warp_annotation, warp_grasp, GraspAnnotation, LabeledPose};
use cls_core::inference::{infer, InferenceConfig, LatentShapeModel};
use nalgebra::{UnitQuaternion, Vector3};
use serde_json::Value;

fn pose(label: &str, p: Vector3<f64>, axis: Vector3<f64>) -> LabeledPose<f64> {
    let mut meta = BTreeMap::new();
    meta.insert("hand".to_string(), Value::from("parallel"));
    LabeledPose {
        label: label.to_string(),
        pose: Pose::new(p, UnitQuaternion::from_scaled_axis(axis)),
        meta,
    }
}

/// Grasps on the canonical mug: on the handle, at the rim, on the body side.
fn mug_annotation() -> GraspAnnotation<f64> {
    let c = &common::trained().model.canonical;
    let (lo, hi) = c.bounding_box().unwrap();
    let mid = (&lo + &hi) * 0.5;
    GraspAnnotation::new(vec![
        pose("handle", Vector3::new(hi[0] - 0.03, 0.0, mid[2]), Vector3::new(0.0, 0.4, 0.0)),
        pose("rim", Vector3::new(0.0, lo[1], hi[2]), Vector3::new(1.2, 0.0, 0.3)),
        pose("side", Vector3::new(lo[0], 0.0, mid[2] - 0.1), Vector3::new(0.0, 0.0, -0.8)),
    ])
    .unwrap()
}

#[test]
fn scaled_canonical_moves_grasps_by_the_scale() {
    let model = &common::trained().model;
    let target = model.canonical.scaled(1.2);
    let reg = cpd_register(&model.canonical, &target, &CpdConfig::default()).unwrap();
    let a = mug_annotation();
    let w = warp_annotation(&a, &reg.field, &RigidTransform::identity()).unwrap();
    assert!(w.rigid_fallbacks.is_empty());
    for (orig, out) in a.poses().iter().zip(w.annotation.poses()) {
        let expected = orig.pose.position * 1.2;
        let err = (out.pose.position - expected).norm() / expected.norm();
        assert!(err < 0.02, "{}: relative error {err}", orig.label);
        assert!((out.pose.orientation.quaternion().norm() - 1.0).abs() < 1e-9);
        assert_eq!(out.label, orig.label);
        assert_eq!(out.meta, orig.meta);
    }
}

#[test]
fn displaced_handle_is_tracked() {
    let spec = CategorySpec::mug(4000);
    let mut low = spec.nominal();
    low[4] = 0.4;
    let mut high = low.clone();
    high[4] = 0.6;
    let dense_a = generate_instance::<f64>(&spec, &low, 1).unwrap();
    let dense_b = generate_instance::<f64>(&spec, &high, 2).unwrap();
    let leaf = leaf_for_count(&dense_a, 300).unwrap();
    let a = dense_a.voxel_downsample(leaf).unwrap();
    let b = dense_b.voxel_downsample(leaf).unwrap();

    // handle arc apex, known analytically in both instances
    let s = spec.unit_scale();
    let apex = |p: &[f64]| Vector3::new(p[0] + p[2], 0.0, -p[1] / 2.0 + p[4] * p[1]) * s;
    let (from, to) = (apex(&low), apex(&high));
    let shift = (to - from).norm();
    assert!(shift > 0.05);

    let reg = cpd_register(&a, &b, &CpdConfig::default()).unwrap();
    let ann = GraspAnnotation::new(vec![pose("handle", from, Vector3::zeros())]).unwrap();
    let w = warp_annotation(&ann, &reg.field, &RigidTransform::identity()).unwrap();
    let got = w.annotation.poses()[0].pose.position;
    let err = (got - to).norm();
    // the field is only resolved to about one voxel
    assert!(err < 0.5 * shift && err < leaf, "tracking error {err} for a shift of {shift}");
}

#[test]
fn warp_after_inference_follows_the_pose() {
    let out = common::trained();
    let lsm = LatentShapeModel::new(out.model.clone()).unwrap();
    let theta = RigidTransform::from_axis_angle(&Vector3::new(0.2, 0.1, 1.0), 0.4, Vector3::new(0.05, -0.03, 0.02)).unwrap();
    let obs = apply_rigid(&out.model.canonical, &theta).unwrap();
    let r = infer(&lsm, &obs, &InferenceConfig::default(), None).unwrap();
    let a = mug_annotation();
    let w = warp_grasp(&a, &r).unwrap();
    assert_eq!(w.provenance.as_ref(), Some(&r.pose));
    let diag = out.model.canonical.diagonal().unwrap();
    for (orig, got) in a.poses().iter().zip(w.annotation.poses()) {
        let expected = theta.apply_pose(&orig.pose);
        assert!((got.pose.position - expected.position).norm() < 0.02 * diag, "{}", orig.label);
        assert!(got.pose.orientation.angle_to(&expected.orientation) < 0.1, "{}", orig.label);
    }
}

#[test]
fn annotation_file_round_trip() {
    let a = mug_annotation();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grasps.json");
    std::fs::write(&path, a.to_json().unwrap()).unwrap();
    let back = GraspAnnotation::<f64>::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_json().unwrap(), a.to_json().unwrap());
}
