//! Parametric shape families standing in for CAD corpora.
//!
//! Every family is built in its canonical pose and frame: body axis through
//! the origin, mug handles on the `+x` side, drill handles pointing to `-z`.
//! Coordinates are scaled so the nominal instance has a bounding-box
//! diagonal of 1.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::perturb::rng_from_seed;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mug,
    Drill,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Mug => "mug",
            Family::Drill => "drill",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub nominal: f64,
}

impl ParamRange {
    fn new(name: &str, min: f64, max: f64, nominal: f64) -> Self {
        Self {
            name: name.to_string(),
            min,
            max,
            nominal,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Descriptor of a synthetic shape family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub family: Family,
    pub params: Vec<ParamRange>,
    /// Total surface samples per instance, split across faces by area.
    pub samples: usize,
}

/// One primitive surface patch of a generated instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub name: &'static str,
    pub area: f64,
    pub count: usize,
}

/// Generated instance with per-point face labels.
#[derive(Clone, Debug)]
pub struct LabeledInstance<T: Real> {
    pub cloud: PointCloud<T>,
    pub labels: Vec<usize>,
    pub faces: Vec<Face>,
}

enum Surface {
    /// Lateral surface of a cylinder: `axis` index, radius, axial span, centre of the other two axes.
    Tube { axis: usize, radius: f64, from: f64, to: f64, center: [f64; 2] },
    /// Disk orthogonal to `axis` at `at`.
    Disk { axis: usize, radius: f64, at: f64, center: [f64; 2] },
    /// Torus arc in the x–z plane, `u ∈ [-π/2, π/2]` around the major circle.
    HandleArc { center: [f64; 3], major: f64, minor: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Tube { radius, from, to, .. } => 2.0 * PI * radius * (to - from).abs(),
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::HandleArc { major, minor, .. } => 2.0 * PI * PI * major * minor,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match *self {
            Surface::Tube { axis, radius, from, to, center } => {
                let s = from + (to - from) * rng.random::<f64>();
                let a = 2.0 * PI * rng.random::<f64>();
                place(axis, s, center[0] + radius * a.cos(), center[1] + radius * a.sin())
            }
            Surface::Disk { axis, radius, at, center } => {
                let r = radius * rng.random::<f64>().sqrt();
                let a = 2.0 * PI * rng.random::<f64>();
                place(axis, at, center[0] + r * a.cos(), center[1] + r * a.sin())
            }
            Surface::HandleArc { center, major, minor } => {
                let u = -PI / 2.0 + PI * rng.random::<f64>();
                // area element ∝ (R + a cos v): rejection sample v
                let v = loop {
                    let v = 2.0 * PI * rng.random::<f64>();
                    if rng.random::<f64>() * (major + minor) <= major + minor * v.cos() {
                        break v;
                    }
                };
                let ring = major + minor * v.cos();
                Vector3::new(
                    center[0] + ring * u.cos(),
                    center[1] + minor * v.sin(),
                    center[2] + ring * u.sin(),
                )
            }
        }
    }
}

/// Point with coordinate `s` on `axis` and `(a, b)` on the remaining axes in cyclic order.
fn place(axis: usize, s: f64, a: f64, b: f64) -> Vector3<f64> {
    let mut p = Vector3::zeros();
    p[axis] = s;
    p[(axis + 1) % 3] = a;
    p[(axis + 2) % 3] = b;
    p
}

impl CategorySpec {
    /// Mug: capped cylinder plus a torus-arc handle. Units are centimetre-like before normalization.
    pub fn mug(samples: usize) -> Self {
        Self {
            family: Family::Mug,
            params: vec![
                ParamRange::new("radius", 3.2, 4.8, 4.0),
                ParamRange::new("height", 7.0, 12.0, 9.5),
                ParamRange::new("handle_radius", 2.2, 3.6, 2.8),
                ParamRange::new("handle_thickness", 0.4, 0.9, 0.6),
                ParamRange::new("handle_height", 0.4, 0.6, 0.5),
            ],
            samples,
        }
    }

    /// Drill: horizontal body cylinder plus a downward handle cylinder.
    pub fn drill(samples: usize) -> Self {
        Self {
            family: Family::Drill,
            params: vec![
                ParamRange::new("body_radius", 1.6, 2.6, 2.0),
                ParamRange::new("body_length", 10.0, 16.0, 13.0),
                ParamRange::new("handle_radius", 1.2, 2.0, 1.5),
                ParamRange::new("handle_length", 7.0, 12.0, 9.0),
                ParamRange::new("handle_offset", 0.25, 0.45, 0.35),
            ],
            samples,
        }
    }

    pub fn for_family(family: Family, samples: usize) -> Self {
        match family {
            Family::Mug => Self::mug(samples),
            Family::Drill => Self::drill(samples),
        }
    }

    pub fn nominal(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.nominal).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("category spec needs at least one sample"));
        }
        for p in &self.params {
            if !(p.min <= p.max) || !p.contains(p.nominal) {
                return Err(Error::invalid(format!("parameter `{}` has an empty range or off-range nominal", p.name)));
            }
        }
        Ok(())
    }

    /// Draws parameters uniformly inside every range.
    pub fn sample_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        self.params
            .iter()
            .map(|p| p.min + (p.max - p.min) * rng.random::<f64>())
            .collect()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} family takes {} parameters, got {}",
                self.family.name(),
                self.params.len(),
                params.len()
            )));
        }
        for (range, &v) in self.params.iter().zip(params) {
            if !range.contains(v) {
                return Err(Error::invalid(format!(
                    "parameter `{}` = {v} outside [{}, {}]",
                    range.name, range.min, range.max
                )));
            }
        }
        Ok(())
    }

    fn surfaces(&self, p: &[f64]) -> Vec<(&'static str, Surface)> {
        match self.family {
            Family::Mug => {
                let (r, h, hr, ht, hz) = (p[0], p[1], p[2], p[3], p[4]);
                vec![
                    ("body", Surface::Tube { axis: 2, radius: r, from: -h / 2.0, to: h / 2.0, center: [0.0, 0.0] }),
                    ("bottom", Surface::Disk { axis: 2, radius: r, at: -h / 2.0, center: [0.0, 0.0] }),
                    ("top", Surface::Disk { axis: 2, radius: r, at: h / 2.0, center: [0.0, 0.0] }),
                    (
                        "handle",
                        Surface::HandleArc { center: [r, 0.0, -h / 2.0 + hz * h], major: hr, minor: ht },
                    ),
                ]
            }
            Family::Drill => {
                let (br, bl, hr, hl, off) = (p[0], p[1], p[2], p[3], p[4]);
                let hx = -bl / 2.0 + off * bl;
                // cyclic placement for axis 2 maps (a, b) to (x, y)
                vec![
                    ("body", Surface::Tube { axis: 0, radius: br, from: -bl / 2.0, to: bl / 2.0, center: [0.0, 0.0] }),
                    ("rear", Surface::Disk { axis: 0, radius: br, at: -bl / 2.0, center: [0.0, 0.0] }),
                    ("front", Surface::Disk { axis: 0, radius: br, at: bl / 2.0, center: [0.0, 0.0] }),
                    ("handle", Surface::Tube { axis: 2, radius: hr, from: -br - hl, to: -br, center: [hx, 0.0] }),
                    ("grip_end", Surface::Disk { axis: 2, radius: hr, at: -br - hl, center: [hx, 0.0] }),
                ]
            }
        }
    }

    /// Analytic bounding-box diagonal before normalization.
    fn raw_diagonal(&self, p: &[f64]) -> f64 {
        let (lo, hi) = match self.family {
            Family::Mug => {
                let (r, h, hr, ht, hz) = (p[0], p[1], p[2], p[3], p[4]);
                let zc = -h / 2.0 + hz * h;
                (
                    Vector3::new(-r, -r.max(ht), (-h / 2.0).min(zc - hr - ht)),
                    Vector3::new(r + hr + ht, r.max(ht), (h / 2.0).max(zc + hr + ht)),
                )
            }
            Family::Drill => {
                let (br, bl, hr, hl, off) = (p[0], p[1], p[2], p[3], p[4]);
                let hx = -bl / 2.0 + off * bl;
                (
                    Vector3::new((-bl / 2.0).min(hx - hr), -br.max(hr), -br - hl),
                    Vector3::new((bl / 2.0).max(hx + hr), br.max(hr), br),
                )
            }
        };
        (hi - lo).norm()
    }

    /// Scale mapping raw family units to model units (nominal diagonal = 1).
    pub fn unit_scale(&self) -> f64 {
        1.0 / self.raw_diagonal(&self.nominal())
    }
}

/// Splits `total` samples across faces proportionally to area (largest remainder, ties to lower index).
fn allocate(total: usize, areas: &[f64]) -> Vec<usize> {
    let sum: f64 = areas.iter().sum();
    let quotas: Vec<f64> = areas.iter().map(|a| total as f64 * a / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Uniform surface samples of one family instance, with face labels.
pub fn generate_labeled<T: Real>(spec: &CategorySpec, params: &[f64], seed: u64) -> Result<LabeledInstance<T>> {
    spec.validate()?;
    spec.check_params(params)?;
    let surfaces = spec.surfaces(params);
    let areas: Vec<f64> = surfaces.iter().map(|(_, s)| s.area()).collect();
    let counts = allocate(spec.samples, &areas);
    let scale = spec.unit_scale();
    let mut rng = rng_from_seed(seed);
    let mut points = DMatrix::zeros(spec.samples, 3);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut row = 0;
    for (face, ((_, surface), &count)) in surfaces.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            let p = surface.sample(&mut rng) * scale;
            for j in 0..3 {
                points[(row, j)] = T::lit(p[j]);
            }
            labels.push(face);
            row += 1;
        }
    }
    let faces = surfaces
        .iter()
        .zip(areas.iter().zip(&counts))
        .map(|((name, _), (&area, &count))| Face {
            name,
            area: area * scale * scale,
            count,
        })
        .collect();
    Ok(LabeledInstance {
        cloud: PointCloud::new(points)?,
        labels,
        faces,
    })
}

/// Uniform surface samples of one family instance in its canonical frame.
pub fn generate_instance<T: Real>(spec: &CategorySpec, params: &[f64], seed: u64) -> Result<PointCloud<T>> {
    generate_labeled(spec, params, seed).map(|l| l.cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mug_handle_on_positive_x() {
        let spec = CategorySpec::mug(2000);
        let inst = generate_labeled::<f64>(&spec, &spec.nominal(), 1).unwrap();
        let handle = inst.faces.iter().position(|f| f.name == "handle").unwrap();
        let radius = spec.nominal()[0] * spec.unit_scale();
        for (i, &l) in inst.labels.iter().enumerate() {
            if l == handle {
                assert!(inst.cloud.point(i)[0] >= radius - 1e-9);
            }
        }
        let (lo, hi) = inst.cloud.bounding_box().unwrap();
        assert!(hi[0] > -lo[0], "handle should extend the +x side");
    }

    #[test]
    fn nominal_diagonal_is_unit() {
        for spec in [CategorySpec::mug(20_000), CategorySpec::drill(20_000)] {
            let c = generate_instance::<f64>(&spec, &spec.nominal(), 3).unwrap();
            let d = c.diagonal().unwrap();
            assert!(d <= 1.0 + 1e-12 && d > 0.97, "{d}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = CategorySpec::drill(300);
        let p = spec.sample_params(9);
        let a = generate_instance::<f64>(&spec, &p, 4).unwrap();
        assert_eq!(a, generate_instance::<f64>(&spec, &p, 4).unwrap());
        assert_eq!(p, spec.sample_params(9));
    }

    #[test]
    fn face_counts_follow_area() {
        for spec in [CategorySpec::mug(3000), CategorySpec::drill(3000)] {
            let inst = generate_labeled::<f64>(&spec, &spec.sample_params(2), 0).unwrap();
            let total_area: f64 = inst.faces.iter().map(|f| f.area).sum();
            for (k, face) in inst.faces.iter().enumerate() {
                let expected = spec.samples as f64 * face.area / total_area;
                let got = inst.labels.iter().filter(|&&l| l == k).count() as f64;
                assert_eq!(got as usize, face.count);
                assert!((got - expected).abs() <= (0.05 * expected).max(1.0), "{}: {got} vs {expected}", face.name);
            }
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let spec = CategorySpec::mug(100);
        let mut p = spec.nominal();
        p[0] = 100.0;
        assert!(generate_instance::<f64>(&spec, &p, 0).is_err());
        assert!(generate_instance::<f64>(&spec, &p[..2], 0).is_err());
    }

    #[test]
    fn allocation_sums_to_total() {
        let c = allocate(301, &[1.0, 1.0, 1.0]);
        assert_eq!(c, vec![101, 100, 100]);
    }
}
