#![allow(dead_code)]

use std::sync::OnceLock;

use cls_core::bench::{build_dataset, Dataset, ExperimentPlan};
use cls_core::shape_space::{train_category, TrainConfig, TrainingOutcome, TrainingSet};

/// Default desk-scale mug data: 10 training and 4 held-out instances, M ≈ 300.
pub fn mugs() -> &'static Dataset<f64> {
    static DATA: OnceLock<Dataset<f64>> = OnceLock::new();
    DATA.get_or_init(|| build_dataset(&ExperimentPlan::default()).expect("dataset"))
}

pub fn training_set() -> TrainingSet<f64> {
    let d = mugs();
    TrainingSet::new(d.train.clone(), d.train_labels.clone()).expect("training set")
}

/// Model trained on [`mugs`] with default settings.
pub fn trained() -> &'static TrainingOutcome<f64> {
    static MODEL: OnceLock<TrainingOutcome<f64>> = OnceLock::new();
    MODEL.get_or_init(|| train_category(&training_set(), &TrainConfig::default()).expect("training"))
}
