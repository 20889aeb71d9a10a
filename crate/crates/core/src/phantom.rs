//! Synthetic labelled volumes with spatially varying mixture parameters.
//!
//! Labels come from a procedural chest-like geometry (background, two lungs and
//! a bone shell). Priors are smoothed label fractions, means and scales carry a
//! sinusoidal perturbation, and intensities are drawn voxel by voxel from the
//! resulting mixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::volume::{Dims, LabelVolume, ParameterField, Volume3D};

pub const BACKGROUND: u8 = 1;
pub const LUNG: u8 = 2;
pub const BONE: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Largest per-axis offset of the label neighbourhood used for the priors.
    pub radius: usize,
    pub prior_shift: f64,
    pub prior_scale: f64,
    pub amplitude: f64,
    /// Sinusoid frequency in units of π.
    pub frequency: f64,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims { dx: 64, dy: 64, dz: 64 },
            mu: vec![1.0, 0.30, 0.75],
            sigma: vec![0.05, 0.05, 0.05],
            radius: 2,
            prior_shift: 0.6,
            prior_scale: 2.8,
            amplitude: 0.25,
            frequency: 8.0,
            sigma_floor: 1e-4,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            seed,
            ..Self::default()
        }
    }

    pub fn components(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        if m == 0 || self.sigma.len() != m {
            return Err(invalid(format!("{} means but {} scales", m, self.sigma.len())));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) || !(self.sigma_floor > 0.0) {
            return Err(invalid("scales and the scale floor must be positive"));
        }
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite base parameter"));
        }
        if !(self.prior_scale > 0.0) || self.prior_shift < 0.0 {
            return Err(invalid("prior rescale constants out of range"));
        }
        let total = (1.0 + m as f64 * self.prior_shift) / self.prior_scale;
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "prior rescale (p + {}) / {} does not keep {m} classes on the simplex",
                self.prior_shift, self.prior_scale
            )));
        }
        Ok(())
    }
}

/// A generated phantom: the label geometry, the true parameter fields, the
/// sampled intensities and the realized class of every voxel.
#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub spec: PhantomSpec,
    pub geometry: LabelVolume,
    pub truth: ParameterField<T>,
    pub volume: Volume3D<T>,
    pub labels: LabelVolume,
}

fn inside(p: [f64; 3], centre: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - centre[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Background 1, two overlapping lung ellipsoids 2 and an ellipsoidal bone
/// shell 3. The seed jitters the lung centres by at most 0.01.
pub fn procedural_labels(dims: Dims, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || rng.gen_range(-0.01..=0.01);
    let lungs = [
        ([0.38 + jitter(), 0.5 + jitter(), 0.5 + jitter()], [0.14, 0.22, 0.28]),
        ([0.62 + jitter(), 0.5 + jitter(), 0.5 + jitter()], [0.14, 0.22, 0.28]),
    ];
    let centre = [0.5; 3];
    let outer = [0.46, 0.40, 0.46];
    let inner = [0.40, 0.34, 0.40];
    let labels = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coord(idx);
            let p = [
                (c.i as f64 + 0.5) / dims.dx as f64,
                (c.j as f64 + 0.5) / dims.dy as f64,
                (c.k as f64 + 0.5) / dims.dz as f64,
            ];
            if lungs.iter().any(|(o, s)| inside(p, *o, *s)) {
                LUNG
            } else if inside(p, centre, outer) && !inside(p, centre, inner) {
                BONE
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelVolume::new(dims, labels, 3).expect("labels are 1..=3")
}

/// Sliding-window sum with window `[-radius, radius]` along one axis, clipped at
/// the borders.
fn box_pass(data: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    let n = dims.axis(axis);
    let stride = match axis {
        0 => 1,
        1 => dims.dx,
        _ => dims.dx * dims.dy,
    };
    (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coord(idx).as_array()[axis];
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(n - 1);
            (lo..=hi).map(|t| data[idx - c * stride + t * stride]).sum()
        })
        .collect()
}

/// Fraction of each label in the in-bounds `(2r+1)^3` neighbourhood of every
/// voxel, then mapped by `p -> (p + shift) / scale`.
pub fn neighborhood_priors(labels: &LabelVolume, spec: &PhantomSpec) -> Result<Vec<Volume3D<f64>>> {
    spec.validate()?;
    let dims = labels.dims();
    if labels.classes() != spec.components() {
        return Err(invalid(format!(
            "label volume has {} classes, spec has {}",
            labels.classes(),
            spec.components()
        )));
    }
    let r = spec.radius;
    let span = |n: usize, c: usize| ((c + r).min(n - 1) - c.saturating_sub(r) + 1) as f64;
    (1..=labels.classes() as u8)
        .map(|m| {
            let mut acc: Vec<f64> = labels
                .labels()
                .iter()
                .map(|&l| if l == m { 1.0 } else { 0.0 })
                .collect();
            for axis in 0..3 {
                acc = box_pass(&acc, dims, axis, r);
            }
            let data = acc
                .iter()
                .enumerate()
                .map(|(idx, &count)| {
                    let c = dims.coord(idx);
                    let total = span(dims.dx, c.i) * span(dims.dy, c.j) * span(dims.dz, c.k);
                    (count / total + spec.prior_shift) / spec.prior_scale
                })
                .collect();
            Volume3D::from_vec(dims, data)
        })
        .collect()
}

/// Product of `sin(f π x_a)` over the three normalized coordinates.
pub fn sinusoid(dims: Dims, frequency: f64) -> Volume3D<f64> {
    let w = frequency * std::f64::consts::PI;
    Volume3D::from_fn(dims, |c| {
        let x: [f64; 3] = c.normalized(dims);
        x.iter().map(|&t| (w * t).sin()).product()
    })
}

/// True fields: the given priors, `μ_m + a·S(x)` and `max(σ_m (1 + S(x)), floor)`.
pub fn parameter_fields<T: Real>(spec: &PhantomSpec, priors: &[Volume3D<f64>]) -> Result<ParameterField<T>> {
    spec.validate()?;
    let m = spec.components();
    if priors.len() != m {
        return Err(invalid(format!("{} prior fields for {m} classes", priors.len())));
    }
    let s = sinusoid(spec.dims, spec.frequency);
    let pi = priors.iter().map(|p| p.cast()).collect();
    let mu = spec
        .mu
        .iter()
        .map(|&b| s.map(|v| b + spec.amplitude * v).cast())
        .collect();
    let sigma = spec
        .sigma
        .iter()
        .map(|&b| s.map(|v| (b * (1.0 + v)).max(spec.sigma_floor)).cast())
        .collect();
    ParameterField::new(pi, mu, sigma)
}

/// Draws a class and an intensity at every voxel. Each voxel uses its own
/// ChaCha stream (keyed by seed and flat index), so the result does not
/// depend on evaluation order or thread count.
pub fn sample_volume<T: Real>(theta: &ParameterField<T>, seed: u64) -> Result<(Volume3D<T>, LabelVolume)> {
    let dims = theta.dims();
    let m = theta.components();
    if m > u8::MAX as usize {
        return Err(invalid(format!("{m} classes do not fit in u8 labels")));
    }
    let draws: Vec<(T, u8)> = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut z = m - 1;
            for k in 0..m {
                acc += theta.pi[k].data()[idx].to_f64_lossy();
                if u < acc {
                    z = k;
                    break;
                }
            }
            let e: f64 = rng.sample(StandardNormal);
            let y = theta.mu[z].data()[idx] + theta.sigma[z].data()[idx] * T::lit(e);
            (y, z as u8 + 1)
        })
        .collect();
    let (values, labels): (Vec<T>, Vec<u8>) = draws.into_iter().unzip();
    Ok((Volume3D::from_vec(dims, values)?, LabelVolume::new(dims, labels, m)?))
}

/// Full generator: geometry, priors, parameter fields, then sampling.
pub fn generate<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    if spec.components() != 3 {
        return Err(invalid("the procedural geometry has exactly 3 classes"));
    }
    let geometry = procedural_labels(spec.dims, spec.seed);
    let priors = neighborhood_priors(&geometry, spec)?;
    let truth = parameter_fields(spec, &priors)?;
    let (volume, labels) = sample_volume(&truth, spec.seed)?;
    Ok(Phantom {
        spec: spec.clone(),
        geometry,
        truth,
        volume,
        labels,
    })
}
