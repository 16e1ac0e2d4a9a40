mod common;

use cls_core::cpd::{cpd_register, CpdConfig};
use cls_core::geometry::perturb::rng_from_seed;
use cls_core::geometry::{apply_rigid, chamfer_error, partial_view, view_directions, PointCloud, RigidTransform};
use cls_core::inference::{
    complete_shape, energy_gradient, infer, inference_energy, EnergyDirection, InferenceConfig, LatentPose,
    LatentShapeModel,
};
use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

fn lsm() -> LatentShapeModel<f64> {
    LatentShapeModel::new(common::trained().model.clone()).unwrap()
}

fn default_sigma2(lsm: &LatentShapeModel<f64>) -> f64 {
    InferenceConfig::default().stages(lsm.diagonal())[0]
}

#[test]
fn canonical_self_fit() {
    let lsm = lsm();
    let c = lsm.model().canonical.clone();
    let r = infer(&lsm, &c, &InferenceConfig::default(), None).unwrap();
    assert!(r.converged);
    let diag = c.diagonal().unwrap();
    assert!(chamfer_error(&r.deformed, &c).unwrap() < 1e-3 * diag);
    assert!(r.energy_trace.windows(2).all(|w| w[1] < w[0] + 1e-10));
}

#[test]
fn training_instances_refit_as_well_as_their_stored_latents() {
    // shape-level check: latent coordinates are not identifiable here, since
    // many weight matrices give nearly the same deformed canonical shape
    let lsm = lsm();
    let out = common::trained();
    let data = common::mugs();
    for (row, i) in (0..data.train.len()).filter(|&i| i != out.canonical_index).enumerate().take(4) {
        let r = infer(&lsm, &data.train[i], &InferenceConfig::default(), None).unwrap();
        assert!(r.converged);
        let stored = lsm.model().training_latents.row(row).transpose();
        let decoded = chamfer_error(&lsm.model().deform(&stored).unwrap(), &data.train[i]).unwrap();
        let refit = chamfer_error(&r.deformed, &data.train[i]).unwrap();
        // the mixture blur at the default bandwidth costs a little accuracy
        assert!(refit <= decoded * 2.0, "instance {i}: refit {refit} vs stored {decoded}");
    }
}

#[test]
fn ground_truth_beats_jittered_latents() {
    let lsm = lsm();
    let sd = lsm.model().latent_sd();
    // at the default (0.05·diag)² the mixture blur favours slightly
    // shrunken shapes over the exact one in about a fifth of the trials
    let sigma2 = (0.03 * lsm.diagonal()).powi(2);
    let mut rng = rng_from_seed(41);
    let mut wins = 0;
    for trial in 0..100 {
        let truth = LatentPose {
            x: lsm.model().sample_latent(1000 + trial),
            theta: RigidTransform::identity(),
        };
        let obs = lsm.posed_shape(&truth).unwrap();
        let jitter = DVector::from_fn(sd.len(), |k, _| 0.5 * sd[k] * rng.sample::<f64, _>(StandardNormal));
        let off = LatentPose {
            x: &truth.x + jitter,
            theta: RigidTransform::identity(),
        };
        let e_true = inference_energy(&lsm, &obs, &truth, sigma2, EnergyDirection::ObservedAsData).unwrap();
        let e_off = inference_energy(&lsm, &obs, &off, sigma2, EnergyDirection::ObservedAsData).unwrap();
        if e_true < e_off {
            wins += 1;
        }
    }
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn larger_variance_flattens_the_landscape() {
    let lsm = lsm();
    let obs = lsm.model().canonical.clone();
    let sd = lsm.model().latent_sd();
    let base = default_sigma2(&lsm);
    let grid: Vec<LatentPose<f64>> = (-2..=2)
        .flat_map(|a| (-2..=2).map(move |b| (a, b)))
        .map(|(a, b)| {
            let mut x = DVector::zeros(sd.len());
            x[0] = a as f64 * sd[0];
            x[1] = b as f64 * sd[1];
            LatentPose {
                x,
                theta: RigidTransform::identity(),
            }
        })
        .collect();
    let spreads: Vec<f64> = [1.0, 10.0, 100.0, 1e3, 1e4]
        .iter()
        .map(|m| {
            let e: Vec<f64> = grid
                .iter()
                .map(|p| inference_energy(&lsm, &obs, p, base * m, EnergyDirection::ObservedAsData).unwrap())
                .collect();
            e.iter().cloned().fold(f64::MIN, f64::max) - e.iter().cloned().fold(f64::MAX, f64::min)
        })
        .collect();
    assert!(spreads.windows(2).all(|w| w[1] < w[0]), "{spreads:?}");
}

#[test]
fn gradient_matches_finite_differences_on_mug_model() {
    let lsm = lsm();
    let sigma2 = default_sigma2(&lsm);
    let data = common::mugs();
    let mut rng = rng_from_seed(5);
    let sd = lsm.model().latent_sd();
    let q = lsm.latent_dim();
    for trial in 0..5 {
        let obs = &data.test[trial % data.test.len()];
        let pose = LatentPose {
            x: DVector::from_fn(q, |k, _| sd[k] * rng.sample::<f64, _>(StandardNormal)),
            theta: RigidTransform::from_axis_angle(
                &Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1),
                rng.random::<f64>() * 0.3,
                Vector3::new(rng.random(), rng.random(), rng.random()) * 0.03,
            )
            .unwrap(),
        };
        for dir in [EnergyDirection::ObservedAsData, EnergyDirection::ModelAsData] {
            let g = energy_gradient(&lsm, obs, &pose, sigma2, dir).unwrap().to_vec();
            let h = 1e-5;
            for k in 0..q + 6 {
                let step = |s: f64| {
                    let mut dx = DVector::zeros(q);
                    let mut dr = Vector3::zeros();
                    let mut dt = Vector3::zeros();
                    if k < q {
                        dx[k] = s;
                    } else if k < q + 3 {
                        dr[k - q] = s;
                    } else {
                        dt[k - q - 3] = s;
                    }
                    pose.retract(&dx, &dr, &dt)
                };
                let e = |p: &LatentPose<f64>| inference_energy(&lsm, obs, p, sigma2, dir).unwrap();
                let numeric = (e(&step(h)) - e(&step(-h))) / (2.0 * h);
                let rel = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "trial {trial} {dir:?} coordinate {k}: {} vs {numeric}", g[k]);
            }
        }
    }
}

#[test]
fn partial_views_favour_latent_inference() {
    let lsm = lsm();
    let data = common::mugs();
    let truth = &data.test[0];
    let cfg = cls_core::bench::bench_inference();
    let mut cls_wins = 0;
    let dirs = view_directions::<f64>(3, 9);
    for dir in &dirs {
        let view = partial_view(truth, dir).unwrap();
        assert!(view.cloud.len() < truth.len());
        let cls = infer(&lsm, &view.cloud, &cfg, None).unwrap();
        let cpd = cpd_register(&lsm.model().canonical, &view.cloud, &CpdConfig::default()).unwrap();
        let cls_err = chamfer_error(&cls.deformed, truth).unwrap();
        let cpd_err = chamfer_error(&cpd.deformed().unwrap(), truth).unwrap();
        if cls_err < cpd_err {
            cls_wins += 1;
        }
        // the completed shape reaches into the culled region
        let hidden = truth.select(&view.hidden_indices(truth.len()));
        let reach = cls_core::geometry::nearest_sq_distances(&hidden, &cls.deformed).unwrap();
        let leaf = data.voxel_leaf;
        assert!(reach.iter().any(|d| *d <= (2.0 * leaf).powi(2)));
    }
    assert!(cls_wins * 2 > dirs.len(), "{cls_wins}/{}", dirs.len());
}

#[test]
fn completion_at_other_resolutions_agrees() {
    let lsm = lsm();
    let data = common::mugs();
    let r = infer(&lsm, &data.test[1], &InferenceConfig::default(), None).unwrap();
    let m = lsm.model().canonical.len();
    assert_eq!(complete_shape(&r, m).unwrap(), r.deformed);
    let dense = complete_shape(&r, 3 * m).unwrap();
    assert_eq!(dense.len(), 3 * m);
    let leaf = data.voxel_leaf;
    let back = dense.voxel_downsample(leaf).unwrap();
    assert!(chamfer_error(&back, &r.deformed).unwrap() < leaf * leaf);
    assert!(chamfer_error(&r.deformed, &back).unwrap() < leaf * leaf);
    let sparse = complete_shape(&r, m / 2).unwrap();
    assert_eq!(sparse.len(), m / 2);
}

#[test]
fn latent_shape_is_pose_independent() {
    let lsm = lsm();
    let obs = &common::mugs().test[2];
    let cfg = InferenceConfig::default();
    let base = infer(&lsm, obs, &cfg, None).unwrap();
    let t = RigidTransform::from_axis_angle(&Vector3::new(0.2, 1.0, -0.4), 1.3, Vector3::new(0.4, -0.7, 0.2)).unwrap();
    let moved = apply_rigid(obs, &t).unwrap();
    let init = LatentPose {
        x: DVector::zeros(lsm.latent_dim()),
        theta: t.clone(),
    };
    let r = infer(&lsm, &moved, &cfg, Some(init)).unwrap();
    assert!((&r.pose.x - &base.pose.x).amax() < 1e-3);
    let q = r.pose.theta.rotation.into_inner().norm();
    assert!((q - 1.0).abs() < 1e-9);
}

#[test]
fn repeated_inference_is_identical() {
    let lsm = lsm();
    let obs = &common::mugs().test[3];
    let cfg = InferenceConfig::default();
    let a = infer(&lsm, obs, &cfg, None).unwrap();
    let b = infer(&lsm, obs, &cfg, None).unwrap();
    assert_eq!(a.energy_trace, b.energy_trace);
    assert_eq!(a.pose, b.pose);
}

#[test]
fn single_precision_fit_tracks_double() {
    let model32 = cls_core::CategoryModelF32::from_record(&common::trained().model.to_record()).unwrap();
    let lsm32 = LatentShapeModel::new(model32).unwrap();
    let obs: PointCloud<f32> = common::mugs().test[0].cast();
    let r = infer(&lsm32, &obs, &InferenceConfig::default(), None).unwrap();
    let err = chamfer_error(&r.deformed, &obs).unwrap();
    assert!(err.is_finite() && err < 5e-3, "{err}");
}
