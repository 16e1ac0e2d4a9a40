//! Fitting a category model to a novel observation by optimizing latent
//! coordinates and a rigid correction jointly.
//!
//! Because decoding is affine in the latent vector and the field is linear
//! in the weights, the deformed canonical shape is
//! `S(x) = S₀ + Σ_k x_k A_k`. The observation is scored with a Gaussian
//! mixture log-likelihood at fixed variance.

use log::debug;
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::cpd::{gaussian_kernel, log_sum_exp, DeformationField};
use crate::error::{Error, Result};
use crate::geometry::cloud::{ensure_same_dim, PointCloud};
use crate::geometry::rigid::{rotation_from_vector, PoseRecord, RigidTransform};
use crate::scalar::Real;
use crate::shape_space::{unflatten_weights, CategoryModel};

/// Which point set plays the role of GMM data in the inference energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyDirection {
    /// `-Σ_n log Σ_m exp(-|o_n − y_m|² / 2σ²)`: observed points are data,
    /// deformed canonical points are centroids. Unobserved canonical regions
    /// are left to the latent prior.
    #[default]
    ObservedAsData,
    /// Sum over deformed canonical points with a positive exponent:
    /// `-Σ_m log Σ_n exp(+|o_n − y_m|² / 2σ²)`.
    ModelAsData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// GMM variance; `None` means `(0.05 · canonical diagonal)²`.
    pub sigma2: Option<f64>,
    /// Optional coarse-to-fine multipliers applied to `sigma2`, e.g. `[16, 4, 1]`.
    pub sigma2_schedule: Option<Vec<f64>>,
    /// Hold the latent vector fixed in every stage but the last, so wide
    /// stages only align the pose.
    pub coarse_pose_only: bool,
    /// Iteration budget per variance stage.
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the energy by less than this
    /// fraction of `max(|E|, 1)`.
    pub energy_tolerance: f64,
    /// Step multipliers on the curvature-scaled gradient for each block.
    pub latent_step: f64,
    pub rotation_step: f64,
    pub translation_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub direction: EnergyDirection,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sigma2: None,
            sigma2_schedule: None,
            coarse_pose_only: true,
            max_iterations: 300,
            gradient_tolerance: 1e-6,
            energy_tolerance: 1e-9,
            latent_step: 1.0,
            rotation_step: 1.0,
            translation_step: 1.0,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            direction: EnergyDirection::ObservedAsData,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma2 {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("sigma2 must be positive, got {s}")));
            }
        }
        if let Some(sched) = &self.sigma2_schedule {
            if sched.is_empty() || sched.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::invalid("sigma2 schedule must be non-empty and positive"));
            }
        }
        for (name, v) in [
            ("gradient_tolerance", self.gradient_tolerance),
            ("energy_tolerance", self.energy_tolerance),
            ("latent_step", self.latent_step),
            ("rotation_step", self.rotation_step),
            ("translation_step", self.translation_step),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::invalid("armijo and backtrack constants must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }

    /// The variance schedule actually used for a canonical shape of diagonal `diag`.
    pub fn stages(&self, diag: f64) -> Vec<f64> {
        let base = self.sigma2.unwrap_or((0.05 * diag).powi(2));
        match &self.sigma2_schedule {
            Some(s) => s.iter().map(|m| m * base).collect(),
            None => vec![base],
        }
    }
}

/// Latent coordinates plus rigid correction.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPose<T: Real> {
    pub x: DVector<T>,
    pub theta: RigidTransform<T>,
}

impl<T: Real> LatentPose<T> {
    pub fn identity(q: usize) -> Self {
        Self {
            x: DVector::zeros(q),
            theta: RigidTransform::identity(),
        }
    }

    /// Moves along a tangent step: `x += dx`, `R ← R exp(dr)`, `t += dt`,
    /// re-normalizing the quaternion.
    pub fn retract(&self, dx: &DVector<T>, dr: &Vector3<T>, dt: &Vector3<T>) -> Self {
        let rot = self.theta.rotation * rotation_from_vector(dr);
        Self {
            x: &self.x + dx,
            theta: RigidTransform::new(
                UnitQuaternion::new_normalize(rot.into_inner()),
                self.theta.translation + dt,
            ),
        }
    }
}

/// Energy gradient in tangent coordinates: latent block, body-frame rotation
/// vector (3) and translation (3). The quaternion's fourth direction only
/// changes its norm and carries no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGradient<T: Real> {
    pub latent: DVector<T>,
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> EnergyGradient<T> {
    pub fn norm(&self) -> T {
        (self.latent.norm_squared() + self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }

    /// All coordinates in one vector: latent, rotation, translation.
    pub fn to_vec(&self) -> Vec<T> {
        self.latent
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .copied()
            .collect()
    }
}

/// Category model pre-expanded into the affine point basis `S₀ + Σ x_k A_k`.
#[derive(Clone, Debug)]
pub struct LatentShapeModel<T: Real> {
    model: CategoryModel<T>,
    mean_shape: DMatrix<T>,
    axes: Vec<DMatrix<T>>,
    diagonal: T,
}

impl<T: Real> LatentShapeModel<T> {
    pub fn new(model: CategoryModel<T>) -> Result<Self> {
        ensure_same_dim(3, model.canonical.dim())?;
        let c = &model.canonical;
        let (m, d) = (c.len(), c.dim());
        let g = gaussian_kernel(c, c, model.beta)?;
        let w0 = unflatten_weights(&model.means, m, d)?;
        let mean_shape = c.matrix() + &g * w0;
        let axes = (0..model.latent_dim)
            .map(|k| {
                let col = model.basis.column(k);
                let raw = DVector::from_fn(col.len(), |j, _| col[j] * model.scales[j]);
                unflatten_weights(&raw, m, d).map(|b| &g * b)
            })
            .collect::<Result<Vec<_>>>()?;
        let diagonal = c.diagonal()?;
        Ok(Self {
            model,
            mean_shape,
            axes,
            diagonal,
        })
    }

    pub fn model(&self) -> &CategoryModel<T> {
        &self.model
    }

    pub fn latent_dim(&self) -> usize {
        self.axes.len()
    }

    pub fn diagonal(&self) -> T {
        self.diagonal
    }

    /// Deformed canonical shape `S(x)` in the canonical frame.
    pub fn shape(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        if x.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                actual: x.len(),
            });
        }
        let mut s = self.mean_shape.clone();
        for (k, a) in self.axes.iter().enumerate() {
            s += a * x[k];
        }
        Ok(s)
    }

    /// `Θ(S(x))` as a point cloud.
    pub fn posed_shape(&self, pose: &LatentPose<T>) -> Result<PointCloud<T>> {
        let s = self.shape(&pose.x)?;
        PointCloud::new(pose_points(&s, &pose.theta))
    }

    pub fn energy(&self, obs: &PointCloud<T>, pose: &LatentPose<T>, sigma2: T, dir: EnergyDirection) -> Result<T> {
        self.evaluate(obs, pose, sigma2, dir, false).map(|e| e.energy)
    }

    pub fn gradient(
        &self,
        obs: &PointCloud<T>,
        pose: &LatentPose<T>,
        sigma2: T,
        dir: EnergyDirection,
    ) -> Result<EnergyGradient<T>> {
        let e = self.evaluate(obs, pose, sigma2, dir, true)?;
        Ok(e.gradient.expect("gradient requested"))
    }

    fn evaluate(
        &self,
        obs: &PointCloud<T>,
        pose: &LatentPose<T>,
        sigma2: T,
        dir: EnergyDirection,
        with_gradient: bool,
    ) -> Result<Evaluation<T>> {
        ensure_same_dim(3, obs.dim())?;
        if obs.is_empty() {
            return Err(Error::EmptyCloud("inference observation"));
        }
        if !(sigma2 > T::zero()) {
            return Err(Error::invalid("sigma2 must be positive"));
        }
        let body = self.shape(&pose.x)?;
        let posed = pose_points(&body, &pose.theta);
        let (m, n) = (posed.nrows(), obs.len());
        let om = obs.matrix();
        let half = T::lit(0.5) / sigma2;
        let mut d2 = DMatrix::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                let mut acc = T::zero();
                for k in 0..3 {
                    let d = posed[(i, k)] - om[(j, k)];
                    acc += d * d;
                }
                d2[(i, j)] = acc;
            }
        }
        // weights[(i, j)]: dE/dy_i = Σ_j weights[(i, j)] (y_i − o_j) / σ²
        let mut weights = DMatrix::zeros(m, n);
        let mut energy = T::zero();
        match dir {
            EnergyDirection::ObservedAsData => {
                for j in 0..n {
                    let col = d2.column(j);
                    let lse = log_sum_exp(col.iter().map(|&d| -d * half));
                    energy -= lse;
                    if with_gradient {
                        for i in 0..m {
                            weights[(i, j)] = (-d2[(i, j)] * half - lse).exp();
                        }
                    }
                }
            }
            EnergyDirection::ModelAsData => {
                for i in 0..m {
                    let row = d2.row(i);
                    let lse = log_sum_exp(row.iter().map(|&d| d * half));
                    energy -= lse;
                    if with_gradient {
                        for j in 0..n {
                            weights[(i, j)] = -(d2[(i, j)] * half - lse).exp();
                        }
                    }
                }
            }
        }
        if !energy.is_finite() {
            return Err(Error::NonFiniteEnergy {
                iteration: 0,
                latent: pose.x.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
        if !with_gradient {
            return Ok(Evaluation {
                energy,
                gradient: None,
                metric: None,
            });
        }
        let rot = pose.theta.rotation_matrix();
        let rot_t = rot.transpose();
        let q = self.latent_dim();
        let dof = q + 6;
        let mut translation = Vector3::zeros();
        let mut rotation = Vector3::zeros();
        let mut latent = DVector::zeros(q);
        let mut metric = DMatrix::zeros(dof, dof);
        let mut jac = DMatrix::zeros(3, dof);
        for i in 0..m {
            let y = Vector3::new(posed[(i, 0)], posed[(i, 1)], posed[(i, 2)]);
            let mut g = Vector3::zeros();
            let mut mass = T::zero();
            for j in 0..n {
                let w = weights[(i, j)];
                if w != T::zero() {
                    g += (y - Vector3::new(om[(j, 0)], om[(j, 1)], om[(j, 2)])) * w;
                    mass += w.abs();
                }
            }
            g /= sigma2;
            translation += g;
            let s = Vector3::new(body[(i, 0)], body[(i, 1)], body[(i, 2)]);
            let local = rot_t * g;
            rotation += s.cross(&local);
            // world-frame Jacobian of y_i: latent axes, body rotation, translation
            for (k, a) in self.axes.iter().enumerate() {
                let ak = Vector3::new(a[(i, 0)], a[(i, 1)], a[(i, 2)]);
                latent[k] += local.dot(&ak);
                jac.fixed_view_mut::<3, 1>(0, k).copy_from(&(rot * ak));
            }
            for c in 0..3 {
                let e = Vector3::ith(c, T::one());
                jac.fixed_view_mut::<3, 1>(0, q + c).copy_from(&(rot * e.cross(&s)));
                jac.fixed_view_mut::<3, 1>(0, q + 3 + c).copy_from(&e);
            }
            metric.gemm_tr(mass, &jac, &jac, T::one());
        }
        metric /= sigma2;
        Ok(Evaluation {
            energy,
            gradient: Some(EnergyGradient {
                latent,
                rotation,
                translation,
            }),
            metric: Some(metric),
        })
    }
}

struct Evaluation<T: Real> {
    energy: T,
    gradient: Option<EnergyGradient<T>>,
    /// Gauss–Newton metric `Σ_m mass_m J_mᵀ J_m / σ²` over (latent, rotation, translation).
    metric: Option<DMatrix<T>>,
}

/// Solves `(H + μ diag(H)) d = -g`, falling back to diagonal scaling.
fn preconditioned_direction<T: Real>(metric: DMatrix<T>, grad: &DVector<T>) -> DVector<T> {
    let n = grad.len();
    let scale = (0..n).map(|i| metric[(i, i)]).fold(T::zero(), |a, b| a.max(b));
    let floor = (scale * T::lit(1e-12)).max(T::lit(1e-300));
    let mut h = metric;
    for i in 0..n {
        let d = h[(i, i)];
        h[(i, i)] = d + d * T::lit(1e-6) + floor;
    }
    let diag: Vec<T> = (0..n).map(|i| h[(i, i)]).collect();
    match h.cholesky() {
        Some(ch) => -ch.solve(grad),
        None => DVector::from_fn(n, |i, _| -grad[i] / diag[i]),
    }
}

fn pose_points<T: Real>(body: &DMatrix<T>, theta: &RigidTransform<T>) -> DMatrix<T> {
    let r = theta.rotation_matrix();
    let mut out = DMatrix::zeros(body.nrows(), 3);
    for i in 0..body.nrows() {
        let p = r * Vector3::new(body[(i, 0)], body[(i, 1)], body[(i, 2)]) + theta.translation;
        for k in 0..3 {
            out[(i, k)] = p[k];
        }
    }
    out
}

/// Inference energy of `pose` against `obs`.
pub fn inference_energy<T: Real>(
    model: &LatentShapeModel<T>,
    obs: &PointCloud<T>,
    pose: &LatentPose<T>,
    sigma2: T,
    dir: EnergyDirection,
) -> Result<T> {
    model.energy(obs, pose, sigma2, dir)
}

/// Analytic tangent-space gradient of [`inference_energy`].
pub fn energy_gradient<T: Real>(
    model: &LatentShapeModel<T>,
    obs: &PointCloud<T>,
    pose: &LatentPose<T>,
    sigma2: T,
    dir: EnergyDirection,
) -> Result<EnergyGradient<T>> {
    model.gradient(obs, pose, sigma2, dir)
}

#[derive(Clone, Debug)]
pub struct InferenceResult<T: Real> {
    pub pose: LatentPose<T>,
    /// Completed shape `Θ(C + G W(x))`.
    pub deformed: PointCloud<T>,
    /// Non-rigid part of the fit over the canonical template.
    pub field: DeformationField<T>,
    /// Energy after every accepted step, starting with the initial energy of
    /// each variance stage.
    pub energy_trace: Vec<f64>,
    /// Index into `energy_trace` where each variance stage starts.
    pub stage_starts: Vec<usize>,
    pub sigma2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> InferenceResult<T> {
    pub fn to_record(&self) -> InferenceRecord {
        InferenceRecord {
            x: self.pose.x.iter().map(|v| v.to_f64_lossy()).collect(),
            theta: self.pose.theta.to_record(),
            energy_trace: self.energy_trace.clone(),
            converged: self.converged,
            stage_starts: self.stage_starts.clone(),
            sigma2: self.sigma2,
            iterations: self.iterations,
        }
    }

    /// Rebuilds a result from its JSON record and the model it was fitted with.
    pub fn from_record(model: &LatentShapeModel<T>, rec: &InferenceRecord) -> Result<Self> {
        let x = DVector::from_iterator(rec.x.len(), rec.x.iter().map(|&v| T::lit(v)));
        let pose = LatentPose {
            x,
            theta: RigidTransform::from_record(&rec.theta)?,
        };
        let field = model.model().decode(&pose.x)?;
        Ok(Self {
            deformed: model.posed_shape(&pose)?,
            field,
            pose,
            energy_trace: rec.energy_trace.clone(),
            stage_starts: rec.stage_starts.clone(),
            sigma2: rec.sigma2,
            iterations: rec.iterations,
            converged: rec.converged,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRecord {
    pub x: Vec<f64>,
    pub theta: PoseRecord,
    pub energy_trace: Vec<f64>,
    pub converged: bool,
    #[serde(default)]
    pub stage_starts: Vec<usize>,
    #[serde(default)]
    pub sigma2: f64,
    #[serde(default)]
    pub iterations: usize,
}

/// Descent preconditioned by the Gauss-Newton metric, with Armijo
/// backtracking, for each variance stage in turn. Non-convergence is
/// reported through the result, not as an error.
pub fn infer<T: Real>(
    model: &LatentShapeModel<T>,
    obs: &PointCloud<T>,
    cfg: &InferenceConfig,
    init: Option<LatentPose<T>>,
) -> Result<InferenceResult<T>> {
    cfg.validate()?;
    ensure_same_dim(3, obs.dim())?;
    if obs.is_empty() {
        return Err(Error::EmptyCloud("inference observation"));
    }
    let q = model.latent_dim();
    let mut pose = init.unwrap_or_else(|| LatentPose::identity(q));
    if pose.x.len() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            actual: pose.x.len(),
        });
    }
    let stages = cfg.stages(model.diagonal().to_f64_lossy());
    let mut trace = Vec::new();
    let mut stage_starts = Vec::new();
    let mut total_iterations = 0;
    let mut converged = false;
    for (k, &sigma2) in stages.iter().enumerate() {
        stage_starts.push(trace.len());
        let pose_only = cfg.coarse_pose_only && k + 1 < stages.len();
        let (next, iters, ok) = descend(model, obs, cfg, pose, T::lit(sigma2), pose_only, &mut trace, total_iterations)?;
        pose = next;
        total_iterations += iters;
        converged = ok;
    }
    let field = model.model().decode(&pose.x)?;
    let deformed = model.posed_shape(&pose)?;
    debug!("inference finished after {total_iterations} iterations (converged: {converged})");
    Ok(InferenceResult {
        pose,
        deformed,
        field,
        energy_trace: trace,
        stage_starts,
        sigma2: *stages.last().expect("at least one stage"),
        iterations: total_iterations,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn descend<T: Real>(
    model: &LatentShapeModel<T>,
    obs: &PointCloud<T>,
    cfg: &InferenceConfig,
    mut pose: LatentPose<T>,
    sigma2: T,
    pose_only: bool,
    trace: &mut Vec<f64>,
    offset: usize,
) -> Result<(LatentPose<T>, usize, bool)> {
    let dir = cfg.direction;
    let nonfinite = |iteration: usize, pose: &LatentPose<T>| Error::NonFiniteEnergy {
        iteration,
        latent: pose.x.iter().map(|v| v.to_f64_lossy()).collect(),
    };
    let mut eval = model
        .evaluate(obs, &pose, sigma2, dir, true)
        .map_err(|_| nonfinite(offset, &pose))?;
    trace.push(eval.energy.to_f64_lossy());
    for iteration in 1..=cfg.max_iterations {
        let mut grad = eval.gradient.take().expect("gradient");
        let metric = eval.metric.take().expect("metric");
        let q = grad.latent.len();
        if pose_only {
            grad.latent.fill(T::zero());
        }
        if grad.norm() < T::lit(cfg.gradient_tolerance) {
            return Ok((pose, iteration - 1, true));
        }
        let (dx, dr, dt) = if pose_only {
            let sub = metric.view((q, q), (6, 6)).into_owned();
            let g = DVector::from_vec(grad.to_vec()).rows(q, 6).into_owned();
            let step = preconditioned_direction(sub, &g);
            (
                DVector::zeros(q),
                Vector3::from_fn(|c, _| step[c] * T::lit(cfg.rotation_step)),
                Vector3::from_fn(|c, _| step[3 + c] * T::lit(cfg.translation_step)),
            )
        } else {
            let step = preconditioned_direction(metric, &DVector::from_vec(grad.to_vec()));
            (
                step.rows(0, q).map(|v| v * T::lit(cfg.latent_step)),
                Vector3::from_fn(|c, _| step[q + c] * T::lit(cfg.rotation_step)),
                Vector3::from_fn(|c, _| step[q + 3 + c] * T::lit(cfg.translation_step)),
            )
        };
        let slope = grad.latent.dot(&dx) + grad.rotation.dot(&dr) + grad.translation.dot(&dt);
        let energy = eval.energy;
        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let candidate = pose.retract(&(&dx * alpha), &(dr * alpha), &(dt * alpha));
            let e = match model.evaluate(obs, &candidate, sigma2, dir, false) {
                Ok(e) => e.energy,
                Err(Error::NonFiniteEnergy { .. }) => T::lit(f64::INFINITY),
                Err(e) => return Err(e),
            };
            if e <= energy + T::lit(cfg.armijo) * alpha * slope && e < energy {
                accepted = Some(candidate);
                break;
            }
            alpha *= T::lit(cfg.backtrack);
        }
        let Some(candidate) = accepted else {
            // no representable decrease along the scaled gradient
            let stationary = (alpha * slope).abs() <= T::lit(1e-13) * energy.abs().max(T::one());
            return Ok((pose, iteration - 1, stationary));
        };
        pose = candidate;
        eval = model
            .evaluate(obs, &pose, sigma2, dir, true)
            .map_err(|_| nonfinite(offset + iteration, &pose))?;
        trace.push(eval.energy.to_f64_lossy());
        let decrease = (energy - eval.energy) / energy.abs().max(T::one());
        if decrease < T::lit(cfg.energy_tolerance) {
            return Ok((pose, iteration, true));
        }
    }
    Ok((pose, cfg.max_iterations, false))
}

/// Completed shape at `count` points. With `count` equal to the canonical
/// size this is `result.deformed`; otherwise the canonical shape is
/// resampled first (evenly spaced subset, or midpoints between neighbours)
/// and carried through the same field and rigid transform.
pub fn complete_shape<T: Real>(result: &InferenceResult<T>, count: usize) -> Result<PointCloud<T>> {
    let canonical = result.field.template();
    if count == canonical.len() {
        return Ok(result.deformed.clone());
    }
    let resampled = resample(canonical, count)?;
    let moved = result.field.apply(&resampled)?;
    crate::geometry::rigid::apply_rigid(&moved, &result.pose.theta)
}

/// Deterministic resampling of a cloud to `count` points.
#[allow(clippy::needless_range_loop)]
pub fn resample<T: Real>(cloud: &PointCloud<T>, count: usize) -> Result<PointCloud<T>> {
    let m = cloud.len();
    if count == 0 {
        return Err(Error::invalid("cannot resample to zero points"));
    }
    if count <= m {
        let idx: Vec<usize> = (0..count).map(|i| i * m / count).collect();
        return Ok(cloud.select(&idx));
    }
    let d2 = crate::geometry::cloud::pairwise_sq_distances(cloud, cloud)?;
    let neighbours: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                d2[(i, a)]
                    .partial_cmp(&d2[(i, b)])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();
    let mut rows = cloud.to_rows();
    let mut seen = std::collections::BTreeSet::new();
    'outer: for rank in 0..m.saturating_sub(1) {
        for i in 0..m {
            if rows.len() >= count {
                break 'outer;
            }
            let j = neighbours[i][rank];
            if !seen.insert((i.min(j), i.max(j))) {
                continue;
            }
            let mid = (0..cloud.dim())
                .map(|k| (cloud.matrix()[(i, k)] + cloud.matrix()[(j, k)]) * T::lit(0.5))
                .collect();
            rows.push(mid);
        }
    }
    if rows.len() < count {
        return Err(Error::invalid(format!("cannot densify {m} points to {count}")));
    }
    PointCloud::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape_space::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5)
    }

    fn toy_model(m: usize, q: usize) -> LatentShapeModel<f64> {
        let canonical = PointCloud::new(random_matrix(m, 3, 1)).unwrap();
        let basis = random_matrix(3 * m, q, 2).qr().q();
        let model = CategoryModel {
            canonical,
            basis,
            latent_dim: q,
            means: DVector::from_fn(3 * m, |i, _| 0.002 * (i % 7) as f64),
            scales: DVector::from_element(3 * m, 0.05),
            beta: 1.0,
            training_latents: DMatrix::from_fn(3, q, |i, k| if i == k { 1.0 } else { -0.5 }),
            training_labels: vec!["a".into(), "b".into(), "c".into()],
            explained_variance: 1.0,
            variance_spectrum: vec![0.6, 0.4],
            registration_residuals: vec![0.0; 3],
            canonical_label: "a".into(),
            provenance: Provenance::default(),
        };
        LatentShapeModel::new(model).unwrap()
    }

    fn pose(x: &[f64], angle: f64, t: [f64; 3]) -> LatentPose<f64> {
        LatentPose {
            x: DVector::from_row_slice(x),
            theta: RigidTransform::from_axis_angle(&Vector3::new(0.3, -1.0, 0.5), angle, Vector3::from(t)).unwrap(),
        }
    }

    #[test]
    fn shape_basis_matches_decode() {
        let lsm = toy_model(30, 2);
        let x = DVector::from_vec(vec![0.4, -1.1]);
        let direct = lsm.model().deform(&x).unwrap();
        let affine = lsm.shape(&x).unwrap();
        assert!((direct.matrix() - affine).amax() < 1e-12);
    }

    fn check_gradient(dir: EnergyDirection) {
        let lsm = toy_model(25, 2);
        let obs = lsm.posed_shape(&pose(&[0.8, -0.3], 0.2, [0.02, -0.01, 0.03])).unwrap();
        let obs = obs.select(&(0..20).collect::<Vec<_>>());
        let p = pose(&[0.1, 0.5], 0.05, [0.0, 0.01, 0.0]);
        let sigma2 = 0.05;
        let grad = lsm.gradient(&obs, &p, sigma2, dir).unwrap();
        let analytic = grad.to_vec();
        let h = 1e-5;
        let e = |pp: &LatentPose<f64>| lsm.energy(&obs, pp, sigma2, dir).unwrap();
        let mut numeric = Vec::new();
        for k in 0..8 {
            let step = |s: f64| {
                let mut dx = DVector::zeros(2);
                let mut dr = Vector3::zeros();
                let mut dt = Vector3::zeros();
                match k {
                    0 | 1 => dx[k] = s,
                    2..=4 => dr[k - 2] = s,
                    _ => dt[k - 5] = s,
                }
                p.retract(&dx, &dr, &dt)
            };
            numeric.push((e(&step(h)) - e(&step(-h))) / (2.0 * h));
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4, "{dir:?}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(EnergyDirection::ObservedAsData);
        check_gradient(EnergyDirection::ModelAsData);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit_with_small_variance() {
        let lsm = toy_model(30, 2);
        let p = pose(&[0.3, -0.7], 0.4, [0.1, 0.0, -0.2]);
        let obs = lsm.posed_shape(&p).unwrap();
        let g = lsm.gradient(&obs, &p, 1e-4, EnergyDirection::ObservedAsData).unwrap();
        assert!(g.norm() < 1e-6, "gradient norm {}", g.norm());
    }

    #[test]
    fn gradient_flattens_with_variance() {
        let lsm = toy_model(30, 2);
        let obs = lsm.posed_shape(&pose(&[1.0, 0.0], 0.3, [0.1, 0.1, 0.0])).unwrap();
        let p = LatentPose::identity(2);
        let small = lsm.gradient(&obs, &p, 1.0, EnergyDirection::ObservedAsData).unwrap().norm();
        let large = lsm.gradient(&obs, &p, 1e4, EnergyDirection::ObservedAsData).unwrap().norm();
        assert!(large < small * 1e-3);
    }

    #[test]
    fn pure_translation_is_recovered() {
        // smooth modes overlap with translation, so compare shapes and centroids
        let lsm = toy_model(40, 2);
        let truth = [0.04, -0.03, 0.02];
        let obs = lsm.posed_shape(&pose(&[0.0, 0.0], 0.0, truth)).unwrap();
        let cfg = InferenceConfig {
            sigma2: Some(1e-3),
            sigma2_schedule: Some(vec![10.0, 1.0]),
            ..Default::default()
        };
        let r = infer(&lsm, &obs, &cfg, None).unwrap();
        assert!(r.converged);
        let shift = r.deformed.centroid().unwrap() - obs.centroid().unwrap();
        assert!(shift.amax() < 1e-3, "{shift:?}");
        assert!(crate::geometry::cloud::chamfer_error(&r.deformed, &obs).unwrap() < 1e-5);
    }

    #[test]
    fn self_fit_and_trace_monotone() {
        let lsm = toy_model(40, 2);
        let truth = pose(&[0.6, -0.4], 0.1, [0.02, 0.0, -0.01]);
        let obs = lsm.posed_shape(&truth).unwrap();
        let cfg = InferenceConfig {
            sigma2: Some(0.005),
            ..Default::default()
        };
        let r = infer(&lsm, &obs, &cfg, None).unwrap();
        assert!(r.converged);
        assert!(r.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        let err = crate::geometry::cloud::chamfer_error(&r.deformed, &obs).unwrap();
        assert!(err < 1e-4, "chamfer {err}");
        assert!((r.pose.theta.rotation.into_inner().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rigid_equivariance() {
        let lsm = toy_model(40, 2);
        let obs = lsm.posed_shape(&pose(&[0.5, 0.2], 0.15, [0.01, 0.02, 0.0])).unwrap();
        let cfg = InferenceConfig {
            sigma2: Some(0.005),
            ..Default::default()
        };
        let base = infer(&lsm, &obs, &cfg, None).unwrap();
        let t = RigidTransform::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.9, Vector3::new(0.5, -0.2, 1.0)).unwrap();
        let moved = crate::geometry::rigid::apply_rigid(&obs, &t).unwrap();
        let init = LatentPose {
            x: DVector::zeros(2),
            theta: t.clone(),
        };
        let r = infer(&lsm, &moved, &cfg, Some(init)).unwrap();
        assert!((&r.pose.x - &base.pose.x).amax() < 1e-3);
    }

    #[test]
    fn inference_is_deterministic() {
        let lsm = toy_model(30, 2);
        let obs = lsm.posed_shape(&pose(&[0.5, 0.2], 0.15, [0.01, 0.02, 0.0])).unwrap();
        let cfg = InferenceConfig::default();
        let a = infer(&lsm, &obs, &cfg, None).unwrap().to_record();
        let b = infer(&lsm, &obs, &cfg, None).unwrap().to_record();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn record_round_trip_and_stages() {
        let lsm = toy_model(30, 2);
        let obs = lsm.posed_shape(&pose(&[0.5, 0.2], 0.15, [0.01, 0.02, 0.0])).unwrap();
        let cfg = InferenceConfig {
            sigma2_schedule: Some(vec![16.0, 4.0, 1.0]),
            ..Default::default()
        };
        let r = infer(&lsm, &obs, &cfg, None).unwrap();
        assert_eq!(r.stage_starts.len(), 3);
        let rec = r.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: InferenceRecord = serde_json::from_str(&json).unwrap();
        let rebuilt = InferenceResult::from_record(&lsm, &back).unwrap();
        assert!((rebuilt.deformed.matrix() - r.deformed.matrix()).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lsm = toy_model(10, 2);
        let obs = lsm.posed_shape(&LatentPose::identity(2)).unwrap();
        assert!(infer(&lsm, &PointCloud::empty(3), &InferenceConfig::default(), None).is_err());
        let bad = InferenceConfig {
            sigma2: Some(-1.0),
            ..Default::default()
        };
        assert!(infer(&lsm, &obs, &bad, None).is_err());
        assert!(infer(&lsm, &obs, &InferenceConfig::default(), Some(LatentPose::identity(3))).is_err());
    }

    #[test]
    fn resample_subset_and_midpoints() {
        let c = PointCloud::new(random_matrix(20, 3, 5)).unwrap();
        assert_eq!(resample(&c, 10).unwrap().len(), 10);
        let dense = resample(&c, 45).unwrap();
        assert_eq!(dense.len(), 45);
        assert_eq!(dense.select(&(0..20).collect::<Vec<_>>()), c);
    }

    #[test]
    fn works_in_single_precision() {
        let lsm64 = toy_model(20, 2);
        let m = lsm64.model();
        let model32 = CategoryModel::<f32>::from_record(&m.to_record()).unwrap();
        let lsm = LatentShapeModel::new(model32).unwrap();
        let obs = lsm.posed_shape(&LatentPose::identity(2)).unwrap();
        let r = infer(&lsm, &obs, &InferenceConfig::default(), None).unwrap();
        assert!(r.energy_trace.iter().all(|e| e.is_finite()));
    }
}
