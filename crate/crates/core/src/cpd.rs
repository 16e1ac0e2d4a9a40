//! Coherent Point Drift: non-rigid GMM registration with a Gaussian-kernel
//! displacement field regularized by motion coherence.
//!
//! Template points are mixture centroids; reference points are data. The
//! fitted field `v(Z) = G(Z, template) · W` is defined for arbitrary points.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::cloud::{ensure_same_dim, pairwise_sq_distances, PointCloud};
use crate::geometry::io::{cloud_from_csv, cloud_to_csv};
use crate::scalar::Real;

/// Responsibility below which a template row is regularized in the M-step.
pub const RESPONSIBILITY_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpdConfig {
    /// Kernel width (model units).
    pub beta: f64,
    /// Motion-coherence weight.
    pub lambda: f64,
    /// Uniform outlier weight in `[0, 1)`.
    pub omega: f64,
    pub max_iterations: usize,
    /// Stop once the relative energy change drops below this.
    pub tolerance: f64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 3.0,
            omega: 0.1,
            max_iterations: 150,
            tolerance: 1e-6,
        }
    }
}

impl CpdConfig {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::invalid(format!("omega must lie in [0, 1), got {}", self.omega)));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Dense non-rigid map `Z ↦ Z + G(Z, template) · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T: Real> {
    template: PointCloud<T>,
    beta: T,
    weights: DMatrix<T>,
}

impl<T: Real> DeformationField<T> {
    pub fn new(template: PointCloud<T>, beta: T, weights: DMatrix<T>) -> Result<Self> {
        if !(beta > T::zero()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        if weights.nrows() != template.len() || weights.ncols() != template.dim() {
            return Err(Error::invalid(format!(
                "weights are {}x{}, template needs {}x{}",
                weights.nrows(),
                weights.ncols(),
                template.len(),
                template.dim()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite deformation weight"));
        }
        Ok(Self {
            template,
            beta,
            weights,
        })
    }

    pub fn zero(template: PointCloud<T>, beta: T) -> Result<Self> {
        let w = DMatrix::zeros(template.len(), template.dim());
        Self::new(template, beta, w)
    }

    pub fn template(&self) -> &PointCloud<T> {
        &self.template
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn weights(&self) -> &DMatrix<T> {
        &self.weights
    }

    pub fn with_weights(&self, weights: DMatrix<T>) -> Result<Self> {
        Self::new(self.template.clone(), self.beta, weights)
    }

    /// Displacement `G(Z, template) · W` for every row of `z`.
    pub fn displacement(&self, z: &PointCloud<T>) -> Result<DMatrix<T>> {
        ensure_same_dim(self.template.dim(), z.dim())?;
        let g = gaussian_kernel(z, &self.template, self.beta)?;
        Ok(g * &self.weights)
    }

    pub fn apply(&self, z: &PointCloud<T>) -> Result<PointCloud<T>> {
        let v = self.displacement(z)?;
        PointCloud::new(z.matrix() + v)
    }

    /// The template carried through its own field, `C + G W`.
    pub fn deformed_template(&self) -> Result<PointCloud<T>> {
        self.apply(&self.template)
    }

    pub fn to_record(&self) -> FieldRecord {
        FieldRecord {
            beta: self.beta.to_f64_lossy(),
            template: cloud_to_csv(&self.template),
            weights: row_major(&self.weights),
        }
    }

    pub fn from_record(rec: &FieldRecord) -> Result<Self> {
        let template: PointCloud<T> = cloud_from_csv(&rec.template, "field template")?;
        let (m, d) = (template.len(), template.dim());
        if rec.weights.len() != m * d {
            return Err(Error::parse(
                "field weights",
                format!("expected {} values, got {}", m * d, rec.weights.len()),
            ));
        }
        let w = DMatrix::from_row_iterator(m, d, rec.weights.iter().map(|&v| T::lit(v)));
        Self::new(template, T::lit(rec.beta), w)
    }
}

pub(crate) fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    m.transpose().iter().map(|v| v.to_f64_lossy()).collect()
}

/// JSON form of a [`DeformationField`]; the template is inline CSV and the
/// weights are flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRecord {
    pub beta: f64,
    pub template: String,
    pub weights: Vec<f64>,
}

/// `g_ij = exp(-|a_i - b_j|² / 2β²)`.
pub fn gaussian_kernel<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>, beta: T) -> Result<DMatrix<T>> {
    if !(beta > T::zero()) {
        return Err(Error::invalid(format!("kernel width must be positive, got {beta}")));
    }
    let scale = -T::one() / (T::lit(2.0) * beta * beta);
    Ok(pairwise_sq_distances(a, b)?.map(|d| (d * scale).exp()))
}

/// E-step output: template × reference responsibilities plus the outlier
/// share of every reference point. Each column of `p` together with its
/// outlier entry sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T: Real> {
    pub p: DMatrix<T>,
    pub outlier: DVector<T>,
}

impl<T: Real> Posterior<T> {
    /// `P 1`: total responsibility carried by every template point.
    pub fn row_mass(&self) -> DVector<T> {
        DVector::from_fn(self.p.nrows(), |m, _| self.p.row(m).sum())
    }

    /// Largest deviation of `Σ_m p_mn + outlier_n` from one.
    pub fn max_column_defect(&self) -> T {
        (0..self.p.ncols())
            .map(|n| (self.p.column(n).sum() + self.outlier[n] - T::one()).abs())
            .fold(T::zero(), |a, b| a.max(b))
    }
}

/// Log of the uniform-outlier term `ω/(1-ω) · (2πσ²)^{D/2} / N`, or `None` for ω = 0.
fn log_outlier_term<T: Real>(sigma2: T, omega: T, dim: usize, n: usize) -> Option<T> {
    if omega <= T::zero() {
        return None;
    }
    let two_pi = T::two_pi();
    Some(
        (omega / (T::one() - omega)).ln() + T::lit(dim as f64 / 2.0) * (two_pi * sigma2).ln()
            - T::from_usize_lossy(n).ln(),
    )
}

/// Computes responsibilities in log space. A column whose mixture mass is
/// negligible next to the outlier term (or non-finite) goes entirely to the
/// outlier component.
pub fn e_step<T: Real>(
    template_deformed: &PointCloud<T>,
    reference: &PointCloud<T>,
    sigma2: T,
    omega: T,
) -> Result<Posterior<T>> {
    if !(sigma2 > T::zero()) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(omega >= T::zero() && omega < T::one()) {
        return Err(Error::invalid(format!("omega must lie in [0, 1), got {omega}")));
    }
    let d2 = pairwise_sq_distances(template_deformed, reference)?;
    let (m, n) = (d2.nrows(), d2.ncols());
    let log_c = log_outlier_term(sigma2, omega, reference.dim(), n);
    let scale = -T::one() / (T::lit(2.0) * sigma2);
    let mut p = DMatrix::zeros(m, n);
    let mut outlier = DVector::zeros(n);
    let mut logits = vec![T::zero(); m];
    for col in 0..n {
        for row in 0..m {
            logits[row] = d2[(row, col)] * scale;
        }
        let mut top = logits.iter().copied().fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
        if let Some(c) = log_c {
            top = top.max(c);
        }
        if !top.is_finite() {
            outlier[col] = T::one();
            continue;
        }
        let mut total = logits.iter().map(|&l| (l - top).exp()).fold(T::zero(), |a, b| a + b);
        if let Some(c) = log_c {
            total += (c - top).exp();
        }
        let log_denom = top + total.ln();
        for row in 0..m {
            p[(row, col)] = (logits[row] - log_denom).exp();
        }
        outlier[col] = match log_c {
            Some(c) => (c - log_denom).exp(),
            None => T::zero(),
        };
    }
    Ok(Posterior { p, outlier })
}

/// Solution of the M-step linear system with its normwise backward error.
#[derive(Clone, Debug)]
pub struct MStep<T: Real> {
    pub weights: DMatrix<T>,
    /// `‖A W − B‖_F / (‖A‖_F ‖W‖_F + ‖B‖_F)`.
    pub residual: T,
    /// Template rows whose responsibility was raised to [`RESPONSIBILITY_EPSILON`].
    pub regularized_rows: usize,
}

/// Solves `(G + λσ² d(P1)⁻¹) W = d(P1)⁻¹ P S_ref − S_tmpl` by Cholesky,
/// falling back to LU when the system is not numerically positive definite.
pub fn m_step<T: Real>(
    template: &PointCloud<T>,
    reference: &PointCloud<T>,
    g: &DMatrix<T>,
    posterior: &Posterior<T>,
    sigma2: T,
    lambda: T,
) -> Result<MStep<T>> {
    ensure_same_dim(template.dim(), reference.dim())?;
    let m = template.len();
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::invalid("kernel matrix must be M x M over the template"));
    }
    if posterior.p.nrows() != m || posterior.p.ncols() != reference.len() {
        return Err(Error::invalid("posterior shape does not match the point sets"));
    }
    let eps = T::lit(RESPONSIBILITY_EPSILON);
    let mut mass = posterior.row_mass();
    let mut regularized_rows = 0;
    for v in mass.iter_mut() {
        if *v < eps {
            *v = eps;
            regularized_rows += 1;
        }
    }
    if regularized_rows > 0 {
        debug!("{regularized_rows} template point(s) without responsibility regularized by {RESPONSIBILITY_EPSILON}");
    }
    let ps = &posterior.p * reference.matrix();
    let mut b = DMatrix::zeros(m, template.dim());
    for row in 0..m {
        for col in 0..template.dim() {
            b[(row, col)] = ps[(row, col)] / mass[row] - template.matrix()[(row, col)];
        }
    }
    let mut a = g.clone();
    for row in 0..m {
        a[(row, row)] += lambda * sigma2 / mass[row];
    }
    let weights = match a.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        None => a
            .clone()
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Solve("M-step system is singular".into()))?,
    };
    let residual = backward_error(&a, &weights, &b);
    Ok(MStep {
        weights,
        residual,
        regularized_rows,
    })
}

pub(crate) fn backward_error<T: Real>(a: &DMatrix<T>, x: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let r = (a * x - b).norm();
    let denom = a.norm() * x.norm() + b.norm();
    if denom > T::zero() {
        r / denom
    } else {
        r
    }
}

/// `σ² = Σ p_mn |r_n − t_m|² / (D Σ p_mn)`, floored at [`Real::variance_floor`].
/// The flag reports whether the floor was applied.
pub fn update_sigma2<T: Real>(
    template_deformed: &PointCloud<T>,
    reference: &PointCloud<T>,
    posterior: &Posterior<T>,
) -> Result<(T, bool)> {
    let d2 = pairwise_sq_distances(template_deformed, reference)?;
    let mut num = T::zero();
    let mut den = T::zero();
    for (p, d) in posterior.p.iter().zip(d2.iter()) {
        num += *p * *d;
        den += *p;
    }
    let floor = T::variance_floor();
    if !(den > T::zero()) {
        warn!("all reference points assigned to the outlier component; sigma2 floored");
        return Ok((floor, true));
    }
    let s = num / (T::from_usize_lossy(reference.dim()) * den);
    if s.is_finite() && s > floor {
        Ok((s, false))
    } else {
        Ok((floor, true))
    }
}

/// Initial variance `Σ_mn |r_n − t_m|² / (D M N)`.
pub fn initial_sigma2<T: Real>(template: &PointCloud<T>, reference: &PointCloud<T>) -> Result<T> {
    let d2 = pairwise_sq_distances(template, reference)?;
    let denom = T::from_usize_lossy(template.dim() * template.len() * reference.len());
    Ok((d2.sum() / denom).max(T::variance_floor()))
}

/// `-Σ_n log Σ_m exp(-|r_n − t_m|² / 2σ²) + (λ/2) tr(Wᵀ G W)`.
pub fn cpd_energy<T: Real>(
    template_deformed: &PointCloud<T>,
    reference: &PointCloud<T>,
    sigma2: T,
    lambda: T,
    weights: &DMatrix<T>,
    g: &DMatrix<T>,
) -> Result<T> {
    let d2 = pairwise_sq_distances(template_deformed, reference)?;
    let scale = -T::one() / (T::lit(2.0) * sigma2);
    let mut data = T::zero();
    for col in 0..d2.ncols() {
        data -= log_sum_exp(d2.column(col).iter().map(|&d| d * scale));
    }
    Ok(data + lambda / T::lit(2.0) * coherence(weights, g))
}

/// `tr(Wᵀ G W)`.
pub fn coherence<T: Real>(weights: &DMatrix<T>, g: &DMatrix<T>) -> T {
    (weights.transpose() * g * weights).trace()
}

pub(crate) fn log_sum_exp<T: Real>(values: impl Iterator<Item = T> + Clone) -> T {
    let top = values.clone().fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
    if !top.is_finite() {
        return top;
    }
    top + values.map(|v| (v - top).exp()).fold(T::zero(), |a, b| a + b).ln()
}

/// Per-iteration diagnostics reported to [`cpd_register_with`] observers.
#[derive(Clone, Debug)]
pub struct IterationRecord<T: Real> {
    pub iteration: usize,
    pub sigma2: T,
    pub energy: T,
    pub m_step_residual: T,
    pub column_defect: T,
}

/// Outcome of a registration: the field plus convergence diagnostics.
#[derive(Clone, Debug)]
pub struct Registration<T: Real> {
    pub field: DeformationField<T>,
    pub sigma2: T,
    pub energy: T,
    pub energy_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> Registration<T> {
    pub fn deformed(&self) -> Result<PointCloud<T>> {
        self.field.deformed_template()
    }
}

pub fn cpd_register<T: Real>(
    template: &PointCloud<T>,
    reference: &PointCloud<T>,
    cfg: &CpdConfig,
) -> Result<Registration<T>> {
    cpd_register_with(template, reference, cfg, |_| {})
}

/// EM loop: E-step, M-step, variance update, until the relative energy
/// change falls below `cfg.tolerance` or `cfg.max_iterations` is reached.
pub fn cpd_register_with<T: Real>(
    template: &PointCloud<T>,
    reference: &PointCloud<T>,
    cfg: &CpdConfig,
    mut observe: impl FnMut(&IterationRecord<T>),
) -> Result<Registration<T>> {
    cfg.validate()?;
    if template.is_empty() {
        return Err(Error::EmptyCloud("cpd_register: template"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyCloud("cpd_register: reference"));
    }
    ensure_same_dim(template.dim(), reference.dim())?;
    let beta = T::lit(cfg.beta);
    let lambda = T::lit(cfg.lambda);
    let omega = T::lit(cfg.omega);
    let tol = T::lit(cfg.tolerance);
    let g = gaussian_kernel(template, template, beta)?;
    let mut weights = DMatrix::zeros(template.len(), template.dim());
    let mut deformed = template.clone();
    let mut sigma2 = initial_sigma2(template, reference)?;
    let mut energy = cpd_energy(&deformed, reference, sigma2, lambda, &weights, &g)?;
    let mut trace = vec![energy];
    let mut converged = false;
    let mut iterations = 0;
    for iteration in 1..=cfg.max_iterations {
        iterations = iteration;
        let posterior = e_step(&deformed, reference, sigma2, omega)?;
        let step = m_step(template, reference, &g, &posterior, sigma2, lambda)?;
        weights = step.weights;
        let moved = template.matrix() + &g * &weights;
        if moved.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                reason: "non-finite deformed template".into(),
            });
        }
        deformed = PointCloud::new(moved)?;
        sigma2 = update_sigma2(&deformed, reference, &posterior)?.0;
        let next = cpd_energy(&deformed, reference, sigma2, lambda, &weights, &g)?;
        if !next.is_finite() {
            return Err(Error::Diverged {
                iteration,
                reason: format!("energy became {next}"),
            });
        }
        observe(&IterationRecord {
            iteration,
            sigma2,
            energy: next,
            m_step_residual: step.residual,
            column_defect: posterior.max_column_defect(),
        });
        trace.push(next);
        let change = (next - energy).abs() / energy.abs().max(T::one());
        energy = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    debug!("cpd finished after {iterations} iterations (converged: {converged}, sigma2 {sigma2})");
    Ok(Registration {
        field: DeformationField::new(template.clone(), beta, weights)?,
        sigma2,
        energy,
        energy_trace: trace,
        iterations,
        converged,
    })
}
