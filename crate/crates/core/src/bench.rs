//! Desk-scale reproduction of the robustness protocol: noise, misalignment
//! and occlusion sweeps comparing latent-space inference (CLS) against
//! direct CPD registration from the canonical shape.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpd::cpd_register;
use crate::error::{Error, Result};
use crate::geometry::cloud::{chamfer_error, nearest_sq_distances, PointCloud};
use crate::geometry::perturb::{
    add_noise, is_protocol_misalignment, partial_view, sample_misalignment, view_directions,
    PROTOCOL_ROTATION_ANGLES, PROTOCOL_TRANSLATION_FACTORS,
};
use crate::geometry::rigid::apply_rigid;
use crate::geometry::synth::{generate_instance, CategorySpec, Family};
use crate::inference::{infer, InferenceConfig, LatentShapeModel};
use crate::scalar::Real;
use crate::shape_space::{train_category, CategoryModel, TrainConfig, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "CPD")]
    Cpd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cls => "CLS",
            Method::Cpd => "CPD",
        }
    }
}

/// Which instances the trials are run on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationSet {
    #[default]
    HeldOut,
    Training,
}

/// Paired translation factors and rotation angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisalignmentSweep {
    pub translation_factors: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Default for MisalignmentSweep {
    fn default() -> Self {
        Self {
            translation_factors: PROTOCOL_TRANSLATION_FACTORS.to_vec(),
            angles: PROTOCOL_ROTATION_ANGLES.to_vec(),
        }
    }
}

impl MisalignmentSweep {
    pub fn none() -> Self {
        Self {
            translation_factors: Vec::new(),
            angles: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub family: Family,
    pub train_instances: usize,
    pub test_instances: usize,
    /// Surface samples drawn per instance before voxel downsampling.
    pub dense_samples: usize,
    /// Desired points per instance; sets the voxel leaf when `voxel_leaf` is absent.
    pub target_points: usize,
    pub voxel_leaf: Option<f64>,
    /// Instance 0 uses the family's nominal parameters.
    pub nominal_first: bool,
    pub seed: u64,
    pub evaluate_on: EvaluationSet,
    /// Include the clean, fully observed condition.
    pub include_full: bool,
    pub noise_factors: Vec<f64>,
    pub misalignment: MisalignmentSweep,
    /// Partial views per instance for the occlusion condition (0 disables it).
    pub views: usize,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

/// Inference settings for benchmark trials: the default fit preceded by
/// two wider, pose-only stages so large rotations are recovered. Applied
/// identically to every condition.
pub fn bench_inference() -> InferenceConfig {
    InferenceConfig {
        sigma2_schedule: Some(vec![16.0, 4.0, 1.0]),
        ..InferenceConfig::default()
    }
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            family: Family::Mug,
            train_instances: 10,
            test_instances: 4,
            dense_samples: 4000,
            target_points: 300,
            voxel_leaf: None,
            nominal_first: true,
            seed: 2017,
            evaluate_on: EvaluationSet::HeldOut,
            include_full: true,
            noise_factors: vec![0.01, 0.02, 0.03],
            misalignment: MisalignmentSweep::default(),
            views: 3,
            methods: vec![Method::Cls, Method::Cpd],
            train: TrainConfig::default(),
            inference: bench_inference(),
        }
    }
}

impl ExperimentPlan {
    /// Checks the plan and returns warnings for off-protocol values.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.train_instances < 2 {
            return Err(Error::invalid("at least two training instances are required"));
        }
        if self.evaluate_on == EvaluationSet::HeldOut && self.test_instances == 0 {
            return Err(Error::invalid("held-out evaluation needs at least one test instance"));
        }
        if self.dense_samples == 0 || self.target_points == 0 {
            return Err(Error::invalid("sample counts must be positive"));
        }
        if let Some(leaf) = self.voxel_leaf {
            if !(leaf > 0.0) {
                return Err(Error::invalid("voxel leaf must be positive"));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("method set is empty"));
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return Err(Error::invalid("method set has duplicates"));
        }
        if self.noise_factors.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::invalid("noise factors must be non-negative"));
        }
        let m = &self.misalignment;
        if m.translation_factors.len() != m.angles.len() {
            return Err(Error::invalid("misalignment factor and angle lists must have equal length"));
        }
        if self.conditions().is_empty() {
            return Err(Error::invalid("plan has no conditions"));
        }
        self.train.cpd.validate()?;
        self.inference.validate()?;
        let mut warnings = Vec::new();
        for (f, a) in m.translation_factors.iter().zip(&m.angles) {
            if !is_protocol_misalignment(*f, *a) {
                warnings.push(format!("misalignment ({f}, {a}) is outside the protocol lists"));
            }
        }
        Ok(warnings)
    }

    /// Every condition of the plan, in report order. Occlusion is one
    /// condition whose trials span all views.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        if self.include_full {
            out.push(Condition::full());
        }
        for &f in &self.noise_factors {
            out.push(Condition {
                axis: Axis::Noise,
                noise: f,
                ..Condition::full()
            });
        }
        for (&f, &a) in self.misalignment.translation_factors.iter().zip(&self.misalignment.angles) {
            out.push(Condition {
                axis: Axis::Misalignment,
                translation: f,
                angle: a,
                ..Condition::full()
            });
        }
        if self.views > 0 {
            out.push(Condition {
                axis: Axis::Occlusion,
                ..Condition::full()
            });
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Full,
    Noise,
    Misalignment,
    Occlusion,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Full => "full",
            Axis::Noise => "noise",
            Axis::Misalignment => "misalignment",
            Axis::Occlusion => "occlusion",
        }
    }
}

/// One perturbation setting; unused values are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub axis: Axis,
    pub noise: f64,
    pub translation: f64,
    pub angle: f64,
}

impl Condition {
    pub fn full() -> Self {
        Self {
            axis: Axis::Full,
            noise: 0.0,
            translation: 0.0,
            angle: 0.0,
        }
    }

    fn order(&self, other: &Self) -> std::cmp::Ordering {
        self.axis
            .cmp(&other.axis)
            .then(self.noise.total_cmp(&other.noise))
            .then(self.translation.total_cmp(&other.translation))
            .then(self.angle.total_cmp(&other.angle))
    }

    fn key(&self) -> (Axis, u64, u64, u64) {
        (self.axis, self.noise.to_bits(), self.translation.to_bits(), self.angle.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub instance: usize,
    pub label: String,
    pub condition: Condition,
    pub view: Option<usize>,
    pub method: Method,
    /// Chamfer error against the noiseless full ground truth; `None` on failure.
    pub error: Option<f64>,
    /// Occlusion only: share of the occluded region covered by the fit
    /// (see [`occluded_region`]).
    pub coverage: Option<f64>,
    /// Occlusion only: size of the occluded region.
    pub occluded_points: Option<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub observed_points: usize,
    pub seed: u64,
    /// `"ok"` or the failure message.
    pub status: String,
    /// Excluded from deterministic outputs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.error.is_none()
    }
}

/// Facts about the trained model and the data it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchContext {
    pub voxel_leaf: f64,
    pub canonical_points: usize,
    pub latent_dim: usize,
    pub explained_variance: f64,
    pub training_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOutcome<T: Real> {
    pub records: Vec<TrialRecord>,
    pub model: CategoryModel<T>,
    pub context: BenchContext,
    pub warnings: Vec<String>,
}

/// Labelled instances of one family at a common voxel resolution.
#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub voxel_leaf: f64,
    pub train: Vec<PointCloud<T>>,
    pub train_labels: Vec<String>,
    pub test: Vec<PointCloud<T>>,
    pub test_labels: Vec<String>,
}

const STREAM_PARAMS: u64 = 1;
const STREAM_SURFACE: u64 = 2;
const STREAM_TRIAL: u64 = 3;
const STREAM_VIEWS: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(stream, index)` under a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

/// Leaf that brings `cloud` closest to `target` points (bisection on the
/// leaf, count is non-increasing in it up to grid effects).
pub fn leaf_for_count<T: Real>(cloud: &PointCloud<T>, target: usize) -> Result<f64> {
    let diag = cloud.diagonal()?.to_f64_lossy();
    if !(diag > 0.0) {
        return Err(Error::invalid("cannot size voxels for a degenerate cloud"));
    }
    let count = |leaf: f64| cloud.voxel_downsample(T::lit(leaf)).map(|c| c.len());
    let (mut lo, mut hi) = (diag * 1e-4, diag);
    let mut best = (usize::MAX, hi);
    for _ in 0..48 {
        let mid = (lo * hi).sqrt();
        let n = count(mid)?;
        let gap = n.abs_diff(target);
        if gap < best.0 || (gap == best.0 && mid > best.1) {
            best = (gap, mid);
        }
        if n > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Generates the plan's instances: dense surface samples, voxel downsampled.
pub fn build_dataset<T: Real>(plan: &ExperimentPlan) -> Result<Dataset<T>> {
    let spec = CategorySpec::for_family(plan.family, plan.dense_samples);
    let total = plan.train_instances + plan.test_instances;
    let dense = (0..total)
        .into_par_iter()
        .map(|i| {
            let params = if i == 0 && plan.nominal_first {
                spec.nominal()
            } else {
                spec.sample_params(derive_seed(plan.seed, STREAM_PARAMS, i as u64))
            };
            generate_instance::<T>(&spec, &params, derive_seed(plan.seed, STREAM_SURFACE, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let leaf = match plan.voxel_leaf {
        Some(l) => l,
        None => leaf_for_count(&dense[0], plan.target_points)?,
    };
    let clouds = dense
        .iter()
        .map(|c| c.voxel_downsample(T::lit(leaf)))
        .collect::<Result<Vec<_>>>()?;
    let name = plan.family.name();
    let labels: Vec<String> = (0..total).map(|i| format!("{name}-{i:02}")).collect();
    let (train, test) = clouds.split_at(plan.train_instances);
    Ok(Dataset {
        voxel_leaf: leaf,
        train: train.to_vec(),
        train_labels: labels[..plan.train_instances].to_vec(),
        test: test.to_vec(),
        test_labels: labels[plan.train_instances..].to_vec(),
    })
}

struct Job {
    instance: usize,
    condition: Condition,
    view: Option<usize>,
    seed: u64,
}

struct Fit<T: Real> {
    deformed: PointCloud<T>,
    converged: bool,
    iterations: usize,
}

/// Trains on the plan's training instances and runs every trial. Trial
/// failures are recorded, not raised; only setup errors abort.
pub fn run_plan<T: Real>(plan: &ExperimentPlan) -> Result<BenchOutcome<T>> {
    let warnings = plan.validate()?;
    for w in &warnings {
        warn!("{w}");
    }
    let data = build_dataset::<T>(plan)?;
    let started = Instant::now();
    let training = TrainingSet::new(data.train.clone(), data.train_labels.clone())?;
    let outcome = train_category(&training, &plan.train)?;
    let training_seconds = started.elapsed().as_secs_f64();
    let model = outcome.model;
    info!(
        "trained {} model: q = {}, explained variance {:.4}, M = {}",
        plan.family.name(),
        model.latent_dim,
        model.explained_variance,
        model.canonical.len()
    );
    let (eval, labels) = match plan.evaluate_on {
        EvaluationSet::HeldOut => (&data.test, &data.test_labels),
        EvaluationSet::Training => (&data.train, &data.train_labels),
    };
    let lsm = LatentShapeModel::new(model.clone())?;
    let mut jobs = Vec::new();
    for (instance, _) in eval.iter().enumerate() {
        for condition in plan.conditions() {
            let views: Vec<Option<usize>> = if condition.axis == Axis::Occlusion {
                (0..plan.views).map(Some).collect()
            } else {
                vec![None]
            };
            for view in views {
                let index = jobs.len() as u64;
                jobs.push(Job {
                    instance,
                    condition,
                    view,
                    seed: derive_seed(plan.seed, STREAM_TRIAL, index),
                });
            }
        }
    }
    let view_dirs: Vec<_> = (0..eval.len())
        .map(|i| view_directions::<T>(plan.views, derive_seed(plan.seed, STREAM_VIEWS, i as u64)))
        .collect();
    let nested: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|job| {
            let truth = &eval[job.instance];
            let dir = job.view.map(|v| &view_dirs[job.instance][v]);
            run_job(plan, &lsm, &model, truth, dir, data.voxel_leaf, job, &labels[job.instance])
        })
        .collect();
    let records = nested.into_iter().flatten().collect();
    Ok(BenchOutcome {
        records,
        context: BenchContext {
            voxel_leaf: data.voxel_leaf,
            canonical_points: model.canonical.len(),
            latent_dim: model.latent_dim,
            explained_variance: model.explained_variance,
            training_seconds,
        },
        model,
        warnings,
    })
}

/// Observation, ground truth and hidden ground-truth indices for one job.
type Scene<T> = (PointCloud<T>, PointCloud<T>, Option<Vec<usize>>);

fn build_scene<T: Real>(
    truth: &PointCloud<T>,
    condition: &Condition,
    dir: Option<&nalgebra::DVector<T>>,
    seed: u64,
    leaf: f64,
) -> Result<Scene<T>> {
    match condition.axis {
        Axis::Full => Ok((truth.clone(), truth.clone(), None)),
        Axis::Noise => Ok((add_noise(truth, T::lit(condition.noise), seed)?, truth.clone(), None)),
        Axis::Misalignment => {
            let t = sample_misalignment(T::lit(condition.translation), T::lit(condition.angle), seed);
            // ground truth is the noiseless full shape in the same pose
            let moved = apply_rigid(truth, &t)?;
            Ok((moved.clone(), moved, None))
        }
        Axis::Occlusion => {
            let dir = dir.ok_or_else(|| Error::invalid("occlusion trial without a view"))?;
            let view = partial_view(truth, dir)?;
            let hidden = view.hidden_indices(truth.len());
            let occluded = occluded_region(truth, &hidden, &view.cloud, leaf)?;
            Ok((view.cloud, truth.clone(), Some(occluded)))
        }
    }
}

/// Coverage radius in voxel leaves.
pub const COVERAGE_LEAVES: f64 = 2.0;

/// Culled ground-truth points farther than the coverage radius from every
/// observed point. Culled points next to the visible boundary are left out:
/// at this tolerance the observation already pins them down.
pub fn occluded_region<T: Real>(
    truth: &PointCloud<T>,
    hidden: &[usize],
    observed: &PointCloud<T>,
    leaf: f64,
) -> Result<Vec<usize>> {
    if hidden.is_empty() {
        return Ok(Vec::new());
    }
    let d2 = nearest_sq_distances(&truth.select(hidden), observed)?;
    let radius2 = (COVERAGE_LEAVES * leaf).powi(2);
    Ok(hidden
        .iter()
        .zip(&d2)
        .filter(|(_, d)| d.to_f64_lossy() > radius2)
        .map(|(&i, _)| i)
        .collect())
}

/// Share of `region` ground-truth points with a fitted point within the
/// coverage radius; 1 for an empty region.
pub fn coverage<T: Real>(truth: &PointCloud<T>, region: &[usize], fitted: &PointCloud<T>, leaf: f64) -> Result<f64> {
    if region.is_empty() {
        return Ok(1.0);
    }
    let d2 = nearest_sq_distances(&truth.select(region), fitted)?;
    let radius2 = (COVERAGE_LEAVES * leaf).powi(2);
    let hits = d2.iter().filter(|d| d.to_f64_lossy() <= radius2).count();
    Ok(hits as f64 / region.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_job<T: Real>(
    plan: &ExperimentPlan,
    lsm: &LatentShapeModel<T>,
    model: &CategoryModel<T>,
    truth: &PointCloud<T>,
    dir: Option<&nalgebra::DVector<T>>,
    leaf: f64,
    job: &Job,
    label: &str,
) -> Vec<TrialRecord> {
    let scene = build_scene(truth, &job.condition, dir, job.seed, leaf);
    plan.methods
        .iter()
        .map(|&method| {
            let started = Instant::now();
            let mut record = TrialRecord {
                instance: job.instance,
                label: label.to_string(),
                condition: job.condition,
                view: job.view,
                method,
                error: None,
                coverage: None,
                occluded_points: None,
                converged: false,
                iterations: 0,
                observed_points: 0,
                seed: job.seed,
                status: String::new(),
                wall_time_s: 0.0,
            };
            let result = match &scene {
                Ok(s) => Ok(s),
                Err(e) => Err(Error::invalid(format!("observation: {e}"))),
            };
            let result = result.and_then(|(obs, gt, hidden)| {
                record.observed_points = obs.len();
                let fit = match method {
                    Method::Cls => infer(lsm, obs, &plan.inference, None).map(|r| Fit {
                        deformed: r.deformed,
                        converged: r.converged,
                        iterations: r.iterations,
                    }),
                    Method::Cpd => cpd_register(&model.canonical, obs, &plan.train.cpd).and_then(|r| {
                        Ok(Fit {
                            deformed: r.deformed()?,
                            converged: r.converged,
                            iterations: r.iterations,
                        })
                    }),
                }?;
                let error = chamfer_error(&fit.deformed, gt)?.to_f64_lossy();
                let cov = match hidden {
                    Some(h) => Some(coverage(gt, h, &fit.deformed, leaf)?),
                    None => None,
                };
                Ok((fit, error, cov, hidden.as_ref().map(Vec::len)))
            });
            match result {
                Ok((fit, error, cov, occluded)) => {
                    record.error = Some(error);
                    record.coverage = cov;
                    record.occluded_points = occluded;
                    record.converged = fit.converged;
                    record.iterations = fit.iterations;
                    record.status = "ok".into();
                }
                Err(e) => {
                    warn!("trial {label} {:?} {} failed: {e}", job.condition.axis, method.name());
                    record.status = e.to_string();
                }
            }
            record.wall_time_s = started.elapsed().as_secs_f64();
            record
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub condition: Condition,
    pub method: Method,
    pub mean: f64,
    /// Population standard deviation over instances.
    pub sd: f64,
    /// Number of instances contributing.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, condition: &Condition, method: Method) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.condition.key() == condition.key())
    }

    /// Mean error of `method` over all rows on `axis`, weighting rows equally.
    pub fn axis_mean(&self, axis: Axis, method: Method) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition.axis == axis && r.method == method)
            .map(|r| r.mean)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,noise,translation,angle,method,mean,sd,n\n");
        for r in &self.rows {
            let c = &r.condition;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.axis.name(),
                c.noise,
                c.translation,
                c.angle,
                r.method.name(),
                r.mean,
                r.sd,
                r.n
            );
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Two-stage averaging: per (condition, method, instance) over views, then
/// over instances. Failed trials are left out. Independent of record order.
pub fn aggregate(records: &[TrialRecord]) -> Summary {
    type GroupKey = ((Axis, u64, u64, u64), Method);
    type ViewErrors = Vec<(Option<usize>, f64)>;
    let mut per_instance: BTreeMap<GroupKey, BTreeMap<usize, ViewErrors>> = BTreeMap::new();
    let mut conditions = BTreeMap::new();
    for r in records {
        let Some(error) = r.error else { continue };
        let key = (r.condition.key(), r.method);
        conditions.insert(key, r.condition);
        per_instance
            .entry(key)
            .or_default()
            .entry(r.instance)
            .or_default()
            .push((r.view, error));
    }
    let mut rows: Vec<SummaryRow> = per_instance
        .into_iter()
        .map(|(key, instances)| {
            let means: Vec<f64> = instances
                .into_values()
                .map(|mut views| {
                    // fixed summation order regardless of input order
                    views.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                    views.iter().map(|v| v.1).sum::<f64>() / views.len() as f64
                })
                .collect();
            let (mean, sd) = mean_sd(&means);
            SummaryRow {
                condition: conditions[&key],
                method: key.1,
                mean,
                sd,
                n: means.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.condition.order(&b.condition).then(a.method.cmp(&b.method)));
    Summary { rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "csv" => Ok(Self::Csv),
            Some(e) if e == "json" => Ok(Self::Json),
            _ => Err(Error::invalid(format!("unknown report format for {}", path.display()))),
        }
    }
}

pub fn render_report(summary: &Summary, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => Ok(summary.to_csv()),
        ReportFormat::Json => summary.to_json(),
    }
}

pub fn emit_report(summary: &Summary, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(summary, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-trial CSV without wall times, so reruns compare byte for byte.
pub fn records_to_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(
        "instance,label,axis,noise,translation,angle,view,method,error,coverage,occluded_points,converged,iterations,observed_points,seed,status\n",
    );
    for r in records {
        let c = &r.condition;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.instance,
            csv_field(&r.label),
            c.axis.name(),
            c.noise,
            c.translation,
            c.angle,
            opt(&r.view),
            r.method.name(),
            opt(&r.error),
            opt(&r.coverage),
            opt(&r.occluded_points),
            r.converged,
            r.iterations,
            r.observed_points,
            r.seed,
            csv_field(&r.status)
        );
    }
    out
}

/// Wall times with the problem sizes they were measured at.
pub fn timings_to_csv(records: &[TrialRecord], context: &BenchContext) -> String {
    let mut out = String::from("instance,axis,view,method,canonical_points,observed_points,latent_dim,wall_time_s\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6}",
            r.instance,
            r.condition.axis.name(),
            opt(&r.view),
            r.method.name(),
            context.canonical_points,
            r.observed_points,
            context.latent_dim,
            r.wall_time_s
        );
    }
    out
}
