use cls_core::bench::{
    aggregate, records_to_csv, run_plan, Axis, EvaluationSet, ExperimentPlan, Method, MisalignmentSweep, Summary,
};

fn small_plan() -> ExperimentPlan {
    ExperimentPlan {
        train_instances: 4,
        test_instances: 1,
        dense_samples: 1500,
        target_points: 120,
        noise_factors: vec![0.01],
        misalignment: MisalignmentSweep {
            translation_factors: vec![0.01],
            angles: vec![std::f64::consts::FRAC_PI_8],
        },
        views: 2,
        ..ExperimentPlan::default()
    }
}

#[test]
fn small_plan_produces_one_record_per_trial() {
    let plan = small_plan();
    let out = run_plan::<f64>(&plan).unwrap();
    assert!(out.warnings.is_empty());
    // full, noise, misalignment, and occlusion over two views; two methods each
    assert_eq!(out.records.len(), (3 + 2) * 2);
    assert!(out.records.iter().all(|r| !r.failed() && r.status == "ok"));
    for r in out.records.iter().filter(|r| r.condition.axis == Axis::Occlusion) {
        assert!(r.view.is_some() && r.coverage.is_some());
        assert!(r.observed_points < out.context.canonical_points + 60);
    }
    let summary = aggregate(&out.records);
    assert_eq!(summary.rows.len(), 4 * 2);
    for row in &summary.rows {
        assert!(row.mean.is_finite() && row.mean >= 0.0);
        assert!(row.sd >= 0.0);
    }
    let occ = summary.rows.iter().find(|r| r.condition.axis == Axis::Occlusion).unwrap();
    assert_eq!(occ.n, 1);
    let back = Summary::from_json(&summary.to_json().unwrap()).unwrap();
    assert_eq!(back, summary);
}

#[test]
fn records_are_reproducible() {
    let mut plan = small_plan();
    plan.views = 1;
    plan.noise_factors.clear();
    let a = run_plan::<f64>(&plan).unwrap();
    let b = run_plan::<f64>(&plan).unwrap();
    assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
    assert_eq!(aggregate(&a.records).to_csv(), aggregate(&b.records).to_csv());
    plan.seed += 1;
    let c = run_plan::<f64>(&plan).unwrap();
    assert_ne!(records_to_csv(&a.records), records_to_csv(&c.records));
}

#[test]
fn training_instances_fit_closely_under_latent_inference() {
    let plan = ExperimentPlan {
        train_instances: 3,
        test_instances: 0,
        dense_samples: 1500,
        target_points: 120,
        evaluate_on: EvaluationSet::Training,
        noise_factors: Vec::new(),
        misalignment: MisalignmentSweep::none(),
        views: 0,
        methods: vec![Method::Cls],
        ..ExperimentPlan::default()
    };
    let out = run_plan::<f64>(&plan).unwrap();
    assert_eq!(out.records.len(), 3);
    let leaf = out.context.voxel_leaf;
    for r in &out.records {
        assert_eq!(r.method, Method::Cls);
        let e = r.error.unwrap();
        // squared distance: well inside half a voxel despite the mixture blur
        assert!(e < (0.5 * leaf).powi(2), "{}: {e}", r.label);
    }
}

#[test]
fn invalid_plans_are_rejected() {
    let mut plan = small_plan();
    plan.methods = vec![Method::Cls, Method::Cls];
    assert!(run_plan::<f64>(&plan).is_err());
    let mut plan = small_plan();
    plan.misalignment.angles.push(0.3);
    assert!(plan.validate().is_err());
    let mut plan = small_plan();
    plan.misalignment = MisalignmentSweep {
        translation_factors: vec![0.5],
        angles: vec![0.0],
    };
    assert_eq!(plan.validate().unwrap().len(), 1);
    assert!(ExperimentPlan::from_json(r#"{"seeds": 3}"#).is_err());
    let partial = ExperimentPlan::from_json(r#"{"seed": 3, "views": 1}"#).unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.train_instances, ExperimentPlan::default().train_instances);
}
