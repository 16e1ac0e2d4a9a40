mod common;

use cls_core::cpd::{cpd_register, CpdConfig};
use cls_core::geometry::{chamfer_error, generate_instance, CategorySpec, Family, PointCloud};
use cls_core::shape_space::{
    flatten_weights, principal_angle_sine, select_canonical, train_category, variance_spectrum, CanonicalChoice,
    CategoryModel, TrainConfig, TrainingSet,
};
use nalgebra::{DMatrix, DVector};

fn cumulative(spectrum: &[f64], q: usize) -> f64 {
    spectrum.iter().take(q).sum()
}

#[test]
fn two_instance_toy_family_gives_one_dimension() {
    let spec = CategorySpec::mug(150);
    let mut small = spec.nominal();
    small[0] = 3.6;
    let a = generate_instance::<f64>(&spec, &spec.nominal(), 1).unwrap();
    let b = generate_instance::<f64>(&spec, &small, 2).unwrap();
    let set = TrainingSet::unlabeled(vec![a.clone(), b.clone()]).unwrap();
    let out = train_category(&set, &TrainConfig::default()).unwrap();
    assert_eq!(out.model.latent_dim, 1);
    let cpd_residual = chamfer_error(&out.registrations[0].deformed().unwrap(), &b).unwrap();
    let x = out.model.training_latents.row(0).transpose();
    let rebuilt = out.model.deform(&x).unwrap();
    assert!(chamfer_error(&rebuilt, &b).unwrap() <= cpd_residual * 1.05 + 1e-12);
}

#[test]
fn mug_model_meets_variance_rule_minimally() {
    let model = &common::trained().model;
    let q = model.latent_dim;
    let spectrum = &model.variance_spectrum;
    assert!(cumulative(spectrum, q) >= 0.95 - 1e-12);
    assert!(q == 1 || cumulative(spectrum, q - 1) < 0.95);
    assert!(model.explained_variance >= 0.95 - 1e-9);
    assert!(q <= 8);
}

#[test]
fn basis_is_orthonormal_and_residual_matches_explained_share() {
    let out = common::trained();
    let l = &out.model.basis;
    let q = out.model.latent_dim;
    assert!((l.transpose() * l - DMatrix::identity(q, q)).amax() < 1e-8);
    let y = &out.design.rows;
    let residual = (y - y * l * l.transpose()).norm_squared();
    let total = y.norm_squared();
    assert!((residual / total - (1.0 - out.model.explained_variance)).abs() < 1e-6);
}

#[test]
fn encoding_a_training_row_returns_its_stored_latent() {
    let out = common::trained();
    for i in 0..out.design.rows.nrows() {
        let row = out.design.rows.row(i).transpose();
        let x = out.model.encode(&row).unwrap();
        let stored = out.model.training_latents.row(i).transpose();
        assert!((x - stored).amax() < 1e-9);
        let raw = flatten_weights(out.registrations[i].field.weights());
        let via_weights = out.model.encode_weights(out.registrations[i].field.weights()).unwrap();
        assert_eq!(raw.len(), out.model.feature_len());
        assert!((via_weights - out.model.training_latents.row(i).transpose()).amax() < 1e-9);
    }
}

fn decode_ratios(out: &cls_core::shape_space::TrainingOutcome<f64>) -> Vec<f64> {
    let data = common::mugs();
    let others: Vec<usize> = (0..data.train.len()).filter(|&i| i != out.canonical_index).collect();
    others
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let x = out.model.training_latents.row(row).transpose();
            let err = chamfer_error(&out.model.deform(&x).unwrap(), &data.train[i]).unwrap();
            err / out.model.registration_residuals[row]
        })
        .collect()
}

#[test]
fn full_rank_model_reconstructs_every_instance() {
    // 9 centred rows have rank 8; keeping all of it loses nothing
    let cfg = TrainConfig {
        latent_dim: Some(8),
        ..TrainConfig::default()
    };
    let out = train_category(&common::training_set(), &cfg).unwrap();
    for (i, r) in decode_ratios(&out).iter().enumerate() {
        assert!(*r <= 1.05, "instance {i}: ratio {r}");
    }
}

#[test]
fn truncated_model_reconstructs_most_instances() {
    let ratios = decode_ratios(common::trained());
    let within = ratios.iter().filter(|r| **r <= 1.05).count();
    assert!(within * 3 >= ratios.len() * 2, "{ratios:?}");
    assert!(ratios.iter().all(|r| *r <= 1.3), "{ratios:?}");
}

#[test]
fn midpoint_latent_lies_between_instances() {
    let out = common::trained();
    let data = common::mugs();
    let others: Vec<usize> = (0..data.train.len()).filter(|&i| i != out.canonical_index).collect();
    // the most distant pair; close pairs sit below the reconstruction floor
    let sym = |a: &PointCloud<f64>, b: &PointCloud<f64>| chamfer_error(a, b).unwrap().min(chamfer_error(b, a).unwrap());
    let mut best = (0, 1, 0.0);
    for i in 0..others.len() {
        for j in i + 1..others.len() {
            let d = sym(&data.train[others[i]], &data.train[others[j]]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let (i, j, apart) = best;
    let xi = out.model.training_latents.row(i).transpose();
    let xj = out.model.training_latents.row(j).transpose();
    let mid = out.model.deform(&((&xi + &xj) * 0.5)).unwrap();
    assert!(chamfer_error(&mid, &data.train[others[i]]).unwrap() < apart);
    assert!(chamfer_error(&mid, &data.train[others[j]]).unwrap() < apart);
}

#[test]
fn displacement_is_linear_along_each_axis() {
    let model = &common::trained().model;
    let base = model.decode_weights(&DVector::zeros(model.latent_dim)).unwrap();
    for k in 0..model.latent_dim {
        let norms: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&s| {
                let mut x = DVector::zeros(model.latent_dim);
                x[k] = s;
                (model.decode_weights(&x).unwrap() - &base).norm()
            })
            .collect();
        assert!(norms[0] < norms[1] && norms[1] < norms[2]);
        assert!((norms[2] / norms[1] - 2.0).abs() < 1e-9);
    }
}

#[test]
fn permuted_training_order_gives_same_basis() {
    let data = common::mugs();
    let reference = common::trained();
    let mut order: Vec<usize> = (1..data.train.len()).rev().collect();
    order.insert(0, 0);
    let instances = order.iter().map(|&i| data.train[i].clone()).collect();
    let labels = order.iter().map(|&i| data.train_labels[i].clone()).collect();
    let set = TrainingSet::new(instances, labels).unwrap();
    let out = train_category(&set, &TrainConfig::default()).unwrap();
    let (a, b) = (&reference.model.basis, &out.model.basis);
    assert_eq!(a.ncols(), b.ncols());
    for k in 0..a.ncols() {
        let (ca, cb) = (a.column(k), b.column(k));
        let sign = if ca.dot(&cb) < 0.0 { -1.0 } else { 1.0 };
        assert!((ca - cb * sign).amax() < 1e-6, "column {k}");
    }
    assert!(principal_angle_sine(a, b) < 1e-6);
}

#[test]
fn metric_median_wins_canonical_selection() {
    let spec = CategorySpec::for_family(Family::Mug, 120);
    let base = generate_instance::<f64>(&spec, &spec.nominal(), 11).unwrap();
    // scale 1.0 is the median of {0.9, 1.1, 1.0}
    let clouds = vec![base.scaled(0.9), base.scaled(1.1), base.scaled(1.0)];
    let set = TrainingSet::unlabeled(clouds.clone()).unwrap();
    let cfg = CpdConfig::default();
    let sel = select_canonical(&set, &cfg).unwrap();
    assert_eq!(sel.registrations, 6);
    // exhaustive oracle: register every ordered pair directly
    let totals: Vec<f64> = (0..3)
        .map(|t| {
            (0..3)
                .filter(|&r| r != t)
                .map(|r| cpd_register(&clouds[t], &clouds[r], &cfg).unwrap().energy)
                .sum()
        })
        .collect();
    for (a, b) in totals.iter().zip(&sel.totals) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
    assert_eq!(sel.index, 2);
    let auto = TrainConfig {
        canonical: CanonicalChoice::Auto,
        ..TrainConfig::default()
    };
    assert_eq!(train_category(&set, &auto).unwrap().canonical_index, 2);
}

#[test]
fn model_file_round_trip_preserves_everything() {
    let model = &common::trained().model;
    let json = model.to_json().unwrap();
    let back = CategoryModel::<f64>::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(back.latent_dim, model.latent_dim);
    let spectrum = variance_spectrum(&common::trained().design.rows);
    assert_eq!(spectrum.len(), model.variance_spectrum.len());
}
