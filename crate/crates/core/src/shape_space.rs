//! Latent space of deformation fields for one object category.
//!
//! Each training instance is registered from the canonical shape, its
//! weight matrix flattened into a feature row, the rows standardized per
//! feature, and a low-dimensional principal subspace extracted by PCA-EM.

use std::collections::BTreeMap;

use log::{info, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpd::{cpd_register, row_major, CpdConfig, DeformationField, Registration};
use crate::error::{Error, Result};
use crate::geometry::cloud::{chamfer_error, PointCloud};
use crate::geometry::io::{cloud_from_csv, cloud_to_csv};
use crate::scalar::Real;

pub const MODEL_VERSION: u32 = 1;

/// Share of variance the latent space must retain.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.95;

/// Row-major flattening of an `M × D` weight matrix.
pub fn flatten_weights<T: Real>(w: &DMatrix<T>) -> DVector<T> {
    DVector::from_iterator(w.len(), w.transpose().iter().copied())
}

pub fn unflatten_weights<T: Real>(y: &DVector<T>, rows: usize, cols: usize) -> Result<DMatrix<T>> {
    if y.len() != rows * cols {
        return Err(Error::invalid(format!(
            "feature vector has {} entries, expected {rows}x{cols}",
            y.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(rows, cols, y.iter().copied()))
}

/// Column-standardized design matrix with the statistics needed to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix<T: Real> {
    /// `n × p`, zero mean and unit (population) variance per column.
    pub rows: DMatrix<T>,
    pub means: DVector<T>,
    pub scales: DVector<T>,
    /// Columns with zero variance; their scale is forced to 1.
    pub constant_columns: Vec<usize>,
}

impl<T: Real> DesignMatrix<T> {
    pub fn standardize_row(&self, raw: &DVector<T>) -> Result<DVector<T>> {
        standardize_with(raw, &self.means, &self.scales)
    }

    pub fn destandardize(&self, standardized: &DMatrix<T>) -> DMatrix<T> {
        let mut out = standardized.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = *v * self.scales[j] + self.means[j];
            }
        }
        out
    }
}

fn standardize_with<T: Real>(raw: &DVector<T>, means: &DVector<T>, scales: &DVector<T>) -> Result<DVector<T>> {
    if raw.len() != means.len() {
        return Err(Error::DimensionMismatch {
            expected: means.len(),
            actual: raw.len(),
        });
    }
    Ok(DVector::from_fn(raw.len(), |j, _| (raw[j] - means[j]) / scales[j]))
}

/// Per-feature zero-mean, unit-variance standardization across instances.
pub fn standardize<T: Real>(rows: &DMatrix<T>) -> Result<DesignMatrix<T>> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::invalid("standardization needs at least two rows"));
    }
    let nn = T::from_usize_lossy(n);
    let p = rows.ncols();
    let mut means = DVector::zeros(p);
    let mut scales = DVector::zeros(p);
    let mut constant_columns = Vec::new();
    let mut out = rows.clone();
    for j in 0..p {
        let col = rows.column(j);
        let mean = col.sum() / nn;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / nn;
        let spread = col.iter().map(|&v| v.abs()).fold(mean.abs(), |a, b| a.max(b));
        let sd = var.sqrt();
        let constant = !(sd > T::epsilon() * spread * T::lit(16.0));
        let scale = if constant {
            constant_columns.push(j);
            T::one()
        } else {
            sd
        };
        means[j] = mean;
        scales[j] = scale;
        for v in out.column_mut(j).iter_mut() {
            *v = if constant { T::zero() } else { (*v - mean) / scale };
        }
    }
    if !constant_columns.is_empty() {
        info!("{} constant feature column(s) left unscaled", constant_columns.len());
    }
    Ok(DesignMatrix {
        rows: out,
        means,
        scales,
        constant_columns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaEmConfig {
    pub max_iterations: usize,
    /// Stop once the largest principal-angle sine between successive
    /// subspaces falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PcaEmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            tolerance: 1e-13,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PcaEmOutcome<T: Real> {
    /// `p × q`, orthonormal columns ordered by decreasing captured variance.
    pub basis: DMatrix<T>,
    pub latent_dim: usize,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
}

const MAX_RESTARTS: usize = 16;

/// Orthonormal basis of the column space of `a` (`p × q`, `q ≤ p`).
fn orthonormal_columns<T: Real>(a: DMatrix<T>) -> DMatrix<T> {
    a.qr().q()
}

/// Sine of the largest principal angle between the spans of two
/// orthonormal column sets.
pub fn principal_angle_sine<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let residual = b - a * (a.transpose() * b);
    let gram = residual.transpose() * &residual;
    let top = SymmetricEigen::new(gram).eigenvalues.max();
    top.max(T::zero()).sqrt()
}

fn random_rows<T: Real>(q: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    DMatrix::from_fn(q, p, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        T::lit(z)
    })
}

/// Singular values computed on the tall orientation of `y`; the dense SVD
/// is noticeably less accurate on wide inputs.
fn singular_values<T: Real>(y: &DMatrix<T>) -> DVector<T> {
    if y.nrows() < y.ncols() {
        y.transpose().singular_values()
    } else {
        y.clone().singular_values()
    }
}

/// Numerical rank from the singular values of `y`.
fn numerical_rank<T: Real>(y: &DMatrix<T>) -> usize {
    let sv = singular_values(y);
    let top = sv.max();
    if !(top > T::zero()) {
        return 0;
    }
    let tol = top * T::epsilon() * T::from_usize_lossy(y.nrows().max(y.ncols())) * T::lit(4.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Principal subspace of `y` by alternating
/// `X = Y Lᵀ (L Lᵀ)⁻¹` and `L = (XᵀX)⁻¹ Xᵀ Y` with `L` held as `q × p`.
///
/// The converged rows are orthonormalized into a `p × q` basis, then rotated
/// within the subspace onto principal axes with a deterministic sign.
pub fn pca_em<T: Real>(y: &DMatrix<T>, q: usize, cfg: &PcaEmConfig) -> Result<PcaEmOutcome<T>> {
    let (n, p) = y.shape();
    if q == 0 || q > p || q + 1 > n.max(1) {
        return Err(Error::invalid(format!(
            "latent dimension {q} outside 1..=min(n-1, p) for a {n}x{p} design matrix"
        )));
    }
    let rank = numerical_rank(y);
    if rank == 0 {
        return Err(Error::invalid("design matrix is identically zero"));
    }
    let q = if rank < q {
        warn!("design matrix has rank {rank} < {q}; latent dimension reduced");
        rank
    } else {
        q
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tol = T::lit(cfg.tolerance);
    let mut restarts = 0;
    let mut loadings: DMatrix<T> = random_rows(q, p, &mut rng);
    let mut current = orthonormal_columns(loadings.transpose());
    let mut converged = false;
    let mut iterations = 0;
    let yt = y.transpose();
    while iterations < cfg.max_iterations {
        iterations += 1;
        // E-step: latent coordinates of every row
        let llt = &loadings * loadings.transpose();
        let x = match llt.cholesky() {
            Some(c) => c.solve(&(&loadings * &yt)).transpose(),
            None => {
                restart(&mut loadings, &mut restarts, q, p, &mut rng)?;
                current = orthonormal_columns(loadings.transpose());
                continue;
            }
        };
        // M-step: loadings given coordinates
        let xtx = x.transpose() * &x;
        loadings = match xtx.cholesky() {
            Some(c) => c.solve(&(x.transpose() * y)),
            None => {
                restart(&mut loadings, &mut restarts, q, p, &mut rng)?;
                current = orthonormal_columns(loadings.transpose());
                continue;
            }
        };
        if loadings.iter().any(|v| !v.is_finite()) {
            restart(&mut loadings, &mut restarts, q, p, &mut rng)?;
            current = orthonormal_columns(loadings.transpose());
            continue;
        }
        let next = orthonormal_columns(loadings.transpose());
        let change = principal_angle_sine(&current, &next);
        current = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("PCA-EM stopped after {iterations} iterations without meeting tolerance");
    }
    Ok(PcaEmOutcome {
        basis: principal_axes(y, current),
        latent_dim: q,
        iterations,
        restarts,
        converged,
    })
}

fn restart<T: Real>(
    loadings: &mut DMatrix<T>,
    restarts: &mut usize,
    q: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    *restarts += 1;
    warn!("PCA-EM hit a singular system; restart {restarts}");
    if *restarts > MAX_RESTARTS {
        return Err(Error::Solve("PCA-EM kept producing singular systems".into()));
    }
    *loadings = random_rows(q, p, rng);
    Ok(())
}

/// Rotates an orthonormal basis onto the principal axes of `y` restricted to
/// its span, ordered by decreasing variance; each column's largest-magnitude
/// entry is made positive.
fn principal_axes<T: Real>(y: &DMatrix<T>, basis: DMatrix<T>) -> DMatrix<T> {
    let z = y * &basis;
    let eig = SymmetricEigen::new(z.transpose() * &z);
    let mut order: Vec<usize> = (0..basis.ncols()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let rotation = eig.eigenvectors.select_columns(order.iter());
    let mut out = basis * rotation;
    for mut col in out.column_iter_mut() {
        let idx = col.iamax();
        if col[idx] < T::zero() {
            col.neg_mut();
        }
    }
    out
}

/// Fraction of total variance captured by each principal direction of `y`.
pub fn variance_spectrum<T: Real>(y: &DMatrix<T>) -> Vec<f64> {
    let sv = singular_values(y);
    let mut sq: Vec<f64> = sv.iter().map(|s| s.to_f64_lossy().powi(2)).collect();
    sq.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = sq.iter().sum();
    if total <= 0.0 {
        return vec![0.0; sq.len()];
    }
    sq.iter().map(|s| s / total).collect()
}

/// Smallest `q` whose cumulative explained variance reaches `threshold`,
/// capped at `min(n - 1, p)` and at least 1.
pub fn select_latent_dim_with<T: Real>(y: &DMatrix<T>, threshold: f64) -> usize {
    let (n, p) = y.shape();
    let cap = (n.saturating_sub(1)).min(p).max(1);
    let spectrum = variance_spectrum(y);
    let mut cumulative = 0.0;
    for (i, share) in spectrum.iter().enumerate() {
        cumulative += share;
        if cumulative >= threshold - 1e-12 {
            return (i + 1).min(cap);
        }
    }
    cap
}

pub fn select_latent_dim<T: Real>(y: &DMatrix<T>) -> usize {
    select_latent_dim_with(y, DEFAULT_VARIANCE_THRESHOLD)
}

/// Shapes used to learn a category, in canonical pose and frame.
#[derive(Clone, Debug)]
pub struct TrainingSet<T: Real> {
    pub instances: Vec<PointCloud<T>>,
    pub labels: Vec<String>,
}

impl<T: Real> TrainingSet<T> {
    pub fn new(instances: Vec<PointCloud<T>>, labels: Vec<String>) -> Result<Self> {
        if instances.len() < 2 {
            return Err(Error::invalid("a training set needs at least two instances"));
        }
        if labels.len() != instances.len() {
            return Err(Error::invalid("one label per training instance is required"));
        }
        let dim = instances[0].dim();
        for (inst, label) in instances.iter().zip(&labels) {
            if inst.dim() != dim {
                return Err(Error::invalid(format!("instance `{label}` has dimension {} != {dim}", inst.dim())));
            }
            if inst.is_empty() {
                return Err(Error::invalid(format!("instance `{label}` is empty")));
            }
        }
        Ok(Self { instances, labels })
    }

    pub fn unlabeled(instances: Vec<PointCloud<T>>) -> Result<Self> {
        let labels = (0..instances.len()).map(|i| format!("instance-{i}")).collect();
        Self::new(instances, labels)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CanonicalSelection {
    pub index: usize,
    /// `energies[(i, j)]`: final energy registering instance `i` onto `j`.
    pub energies: DMatrix<f64>,
    pub totals: Vec<f64>,
    pub registrations: usize,
}

/// Registers every instance onto every other one and picks the template with
/// the lowest summed final energy (ties go to the lower index).
pub fn select_canonical<T: Real>(training: &TrainingSet<T>, cfg: &CpdConfig) -> Result<CanonicalSelection> {
    let n = training.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let energies: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            cpd_register(&training.instances[i], &training.instances[j], cfg)
                .map(|r| r.energy.to_f64_lossy())
                .map_err(|e| Error::Registration {
                    instance: format!("{} -> {}", training.labels[i], training.labels[j]),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let mut matrix = DMatrix::zeros(n, n);
    for (&(i, j), &e) in pairs.iter().zip(&energies) {
        matrix[(i, j)] = e;
    }
    let totals: Vec<f64> = (0..n).map(|i| matrix.row(i).sum()).collect();
    let mut index = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t < totals[index] {
            index = i;
        }
    }
    Ok(CanonicalSelection {
        index,
        energies: matrix,
        totals,
        registrations: pairs.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalChoice {
    Auto,
    Index(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub cpd: CpdConfig,
    pub canonical: CanonicalChoice,
    pub variance_threshold: f64,
    /// Fixes the latent dimension instead of applying the variance rule.
    pub latent_dim: Option<usize>,
    pub pca: PcaEmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cpd: CpdConfig::default(),
            canonical: CanonicalChoice::Index(0),
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            latent_dim: None,
            pca: PcaEmConfig::default(),
        }
    }
}

/// Everything needed to reproduce a trained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seeds: BTreeMap<String, u64>,
    pub cfg: Option<TrainConfig>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Canonical shape plus latent basis of its deformation fields.
#[derive(Clone, Debug)]
pub struct CategoryModel<T: Real> {
    pub canonical: PointCloud<T>,
    /// `p × q`, orthonormal columns.
    pub basis: DMatrix<T>,
    pub latent_dim: usize,
    pub means: DVector<T>,
    pub scales: DVector<T>,
    pub beta: T,
    /// One row per instance that contributed a design-matrix row.
    pub training_latents: DMatrix<T>,
    pub training_labels: Vec<String>,
    pub explained_variance: f64,
    pub variance_spectrum: Vec<f64>,
    /// Chamfer error of each CPD fit used for training.
    pub registration_residuals: Vec<f64>,
    pub canonical_label: String,
    pub provenance: Provenance,
}

impl<T: Real> CategoryModel<T> {
    pub fn feature_len(&self) -> usize {
        self.canonical.len() * self.canonical.dim()
    }

    /// `x = Lᵀ y` for a standardized feature vector.
    pub fn encode(&self, y_standardized: &DVector<T>) -> Result<DVector<T>> {
        if y_standardized.len() != self.feature_len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_len(),
                actual: y_standardized.len(),
            });
        }
        Ok(self.basis.transpose() * y_standardized)
    }

    /// Latent coordinates of a raw weight matrix.
    pub fn encode_weights(&self, weights: &DMatrix<T>) -> Result<DVector<T>> {
        let y = standardize_with(&flatten_weights(weights), &self.means, &self.scales)?;
        self.encode(&y)
    }

    /// Weight matrix for latent coordinates `x`: `unflatten(means + scales ⊙ L x)`.
    pub fn decode_weights(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        if x.len() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                actual: x.len(),
            });
        }
        let y = &self.basis * x;
        let raw = DVector::from_fn(y.len(), |j, _| y[j] * self.scales[j] + self.means[j]);
        unflatten_weights(&raw, self.canonical.len(), self.canonical.dim())
    }

    pub fn decode(&self, x: &DVector<T>) -> Result<DeformationField<T>> {
        DeformationField::new(self.canonical.clone(), self.beta, self.decode_weights(x)?)
    }

    /// Canonical shape deformed by the field of `x`.
    pub fn deform(&self, x: &DVector<T>) -> Result<PointCloud<T>> {
        self.decode(x)?.deformed_template()
    }

    /// Per-axis standard deviation of the training latents.
    pub fn latent_sd(&self) -> DVector<T> {
        let n = T::from_usize_lossy(self.training_latents.nrows().max(1));
        DVector::from_fn(self.latent_dim, |k, _| {
            let col = self.training_latents.column(k);
            let mean = col.sum() / n;
            (col.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / n).sqrt()
        })
    }

    /// Draws `x ~ N(0, diag(latent_sd²))`.
    pub fn sample_latent(&self, seed: u64) -> DVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = self.latent_sd();
        DVector::from_fn(self.latent_dim, |k, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd[k] * T::lit(z)
        })
    }

    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            version: MODEL_VERSION,
            beta: self.beta.to_f64_lossy(),
            canonical: cloud_to_csv(&self.canonical),
            canonical_label: self.canonical_label.clone(),
            means: self.means.iter().map(|v| v.to_f64_lossy()).collect(),
            scales: self.scales.iter().map(|v| v.to_f64_lossy()).collect(),
            basis: row_major(&self.basis),
            latent_dim: self.latent_dim,
            training_latents: row_major(&self.training_latents),
            training_labels: self.training_labels.clone(),
            explained_variance: self.explained_variance,
            variance_spectrum: self.variance_spectrum.clone(),
            registration_residuals: self.registration_residuals.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_record(rec: &ModelRecord) -> Result<Self> {
        if rec.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(rec.version));
        }
        let canonical: PointCloud<T> = cloud_from_csv(&rec.canonical, "model canonical")?;
        let p = canonical.len() * canonical.dim();
        let q = rec.latent_dim;
        let n = rec.training_labels.len();
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::parse("model", format!("`{name}` has {got} values, expected {want}")))
            }
        };
        check("means", rec.means.len(), p)?;
        check("scales", rec.scales.len(), p)?;
        check("basis", rec.basis.len(), p * q)?;
        check("training_latents", rec.training_latents.len(), n * q)?;
        if q == 0 {
            return Err(Error::parse("model", "latent_dim must be at least 1"));
        }
        let lit = |v: &f64| T::lit(*v);
        Ok(Self {
            basis: DMatrix::from_row_iterator(p, q, rec.basis.iter().map(lit)),
            latent_dim: q,
            means: DVector::from_iterator(p, rec.means.iter().map(lit)),
            scales: DVector::from_iterator(p, rec.scales.iter().map(lit)),
            beta: T::lit(rec.beta),
            training_latents: DMatrix::from_row_iterator(n, q, rec.training_latents.iter().map(lit)),
            training_labels: rec.training_labels.clone(),
            explained_variance: rec.explained_variance,
            variance_spectrum: rec.variance_spectrum.clone(),
            registration_residuals: rec.registration_residuals.clone(),
            canonical_label: rec.canonical_label.clone(),
            provenance: rec.provenance.clone(),
            canonical,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            Some(v) => return Err(Error::UnsupportedVersion(v as u32)),
            None => return Err(Error::parse("model", "missing `version`")),
        }
        Self::from_record(&serde_json::from_value(value)?)
    }
}

/// JSON document for a [`CategoryModel`]. Matrices are row-major; the
/// canonical shape is inline CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub version: u32,
    pub beta: f64,
    pub canonical: String,
    pub canonical_label: String,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub basis: Vec<f64>,
    pub latent_dim: usize,
    pub training_latents: Vec<f64>,
    pub training_labels: Vec<String>,
    pub explained_variance: f64,
    pub variance_spectrum: Vec<f64>,
    pub registration_residuals: Vec<f64>,
    pub provenance: Provenance,
}

/// Trained model plus the intermediate products of training.
#[derive(Clone, Debug)]
pub struct TrainingOutcome<T: Real> {
    pub model: CategoryModel<T>,
    pub canonical_index: usize,
    pub selection: Option<CanonicalSelection>,
    pub design: DesignMatrix<T>,
    /// CPD fits from the canonical shape, aligned with `model.training_labels`.
    pub registrations: Vec<Registration<T>>,
    pub pca: PcaEmOutcome<T>,
}

/// Learns the latent deformation space of a category: choose the canonical
/// shape, register it onto every other instance, standardize the flattened
/// weights, pick the latent dimension and extract the basis.
///
/// Only non-canonical instances contribute rows. With a single such
/// instance, the canonical's zero self-deformation is added as a second row
/// so that per-feature variance is defined.
pub fn train_category<T: Real>(training: &TrainingSet<T>, cfg: &TrainConfig) -> Result<TrainingOutcome<T>> {
    cfg.cpd.validate()?;
    let (canonical_index, selection) = match cfg.canonical {
        CanonicalChoice::Index(i) if i < training.len() => (i, None),
        CanonicalChoice::Index(i) => {
            return Err(Error::invalid(format!(
                "canonical index {i} out of range for {} instances",
                training.len()
            )))
        }
        CanonicalChoice::Auto => {
            let sel = select_canonical(training, &cfg.cpd)?;
            (sel.index, Some(sel))
        }
    };
    let canonical = &training.instances[canonical_index];
    let others: Vec<usize> = (0..training.len()).filter(|&i| i != canonical_index).collect();
    let registrations: Vec<Registration<T>> = others
        .par_iter()
        .map(|&i| {
            cpd_register(canonical, &training.instances[i], &cfg.cpd).map_err(|e| Error::Registration {
                instance: training.labels[i].clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut residuals = Vec::with_capacity(others.len());
    for (reg, &i) in registrations.iter().zip(&others) {
        residuals.push(chamfer_error(&reg.deformed()?, &training.instances[i])?.to_f64_lossy());
    }
    let p = canonical.len() * canonical.dim();
    let mut labels: Vec<String> = others.iter().map(|&i| training.labels[i].clone()).collect();
    let mut raw = DMatrix::zeros(others.len(), p);
    for (r, reg) in registrations.iter().enumerate() {
        raw.row_mut(r).copy_from(&flatten_weights(reg.field.weights()).transpose());
    }
    if others.len() == 1 {
        raw = raw.insert_row(1, T::zero());
        labels.push(training.labels[canonical_index].clone());
        residuals.push(0.0);
    }
    let design = standardize(&raw)?;
    let spectrum = variance_spectrum(&design.rows);
    let q = match cfg.latent_dim {
        Some(q) => q,
        None => select_latent_dim_with(&design.rows, cfg.variance_threshold),
    };
    let pca = pca_em(&design.rows, q, &cfg.pca)?;
    let latents = &design.rows * &pca.basis;
    let total = design.rows.norm_squared();
    let explained = if total.to_f64_lossy() > 0.0 {
        1.0 - (&design.rows - &latents * pca.basis.transpose()).norm_squared().to_f64_lossy() / total.to_f64_lossy()
    } else {
        1.0
    };
    info!(
        "trained latent space: q = {}, explained variance {:.4}, canonical `{}`",
        pca.latent_dim, explained, training.labels[canonical_index]
    );
    let mut provenance = Provenance::default();
    provenance.seeds.insert("pca".into(), cfg.pca.seed);
    provenance.cfg = Some(cfg.clone());
    let model = CategoryModel {
        canonical: canonical.clone(),
        basis: pca.basis.clone(),
        latent_dim: pca.latent_dim,
        means: design.means.clone(),
        scales: design.scales.clone(),
        beta: T::lit(cfg.cpd.beta),
        training_latents: latents,
        training_labels: labels,
        explained_variance: explained,
        variance_spectrum: spectrum,
        registration_residuals: residuals,
        canonical_label: training.labels[canonical_index].clone(),
        provenance,
    };
    Ok(TrainingOutcome {
        model,
        canonical_index,
        selection,
        design,
        registrations,
        pca,
    })
}
