//! Spatially constant comparison methods: Lloyd k-means and a global
//! Gaussian mixture fitted by classical EM.
//!
//! Components are always reported in ascending order of their mean so that
//! class indices line up across methods.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{std_normal_ln_pdf, Real};
use crate::volume::{Dims, LabelVolume, ParameterField, Volume3D};

/// Constant-parameter mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalTheta<T> {
    pub pi: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> GlobalTheta<T> {
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.pi.len();
        if m == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        if self.mu.len() != m || self.sigma.len() != m {
            return Err(Error::ComponentMismatch(m, self.mu.len().min(self.sigma.len())));
        }
        if self.sigma.iter().any(|&s| !(s > T::zero())) {
            return Err(invalid("component standard deviations must be positive"));
        }
        Ok(())
    }

    /// Log of `φ((y-μ_m)/σ_m) π_m / σ_m` for each component.
    fn log_weights(&self, y: T, out: &mut [T]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.pi[m].ln() - self.sigma[m].ln() + std_normal_ln_pdf((y - self.mu[m]) / self.sigma[m]);
        }
    }

    /// Mixture log-density of one observation.
    pub fn ln_density(&self, y: T) -> T {
        let mut w = vec![T::zero(); self.components()];
        self.log_weights(y, &mut w);
        log_sum_exp(&w)
    }

    /// Most probable component (zero-based); ties go to the smaller index.
    pub fn classify(&self, y: T) -> usize {
        let mut w = vec![T::zero(); self.components()];
        self.log_weights(y, &mut w);
        argmax(&w)
    }

    /// Reorders components by ascending mean.
    pub fn sorted_by_mean(&self) -> Self {
        let mut order: Vec<usize> = (0..self.components()).collect();
        order.sort_by(|&a, &b| self.mu[a].partial_cmp(&self.mu[b]).unwrap_or(std::cmp::Ordering::Equal));
        Self {
            pi: order.iter().map(|&o| self.pi[o]).collect(),
            mu: order.iter().map(|&o| self.mu[o]).collect(),
            sigma: order.iter().map(|&o| self.sigma[o]).collect(),
        }
    }
}

pub(crate) fn log_sum_exp<T: Real>(w: &[T]) -> T {
    let max = w.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + w.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn argmax<T: Real>(w: &[T]) -> usize {
    let mut best = 0;
    for (m, &x) in w.iter().enumerate().skip(1) {
        if x > w[best] {
            best = m;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct KMeansResult<T> {
    /// Ascending centroids.
    pub centroids: Vec<T>,
    /// Zero-based cluster of each input value.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_trace: Vec<T>,
}

impl<T: Real> KMeansResult<T> {
    /// Centroids as means, cluster shares as priors, within-cluster standard
    /// deviations (floored) as scales.
    pub fn to_theta(&self, values: &[T], sigma_floor: T) -> GlobalTheta<T> {
        let m = self.centroids.len();
        let mut count = vec![0usize; m];
        let mut ss = vec![T::zero(); m];
        for (&y, &c) in values.iter().zip(&self.assignments) {
            count[c] += 1;
            let d = y - self.centroids[c];
            ss[c] = ss[c] + d * d;
        }
        let n = T::from_usize_lossy(values.len());
        GlobalTheta {
            pi: count.iter().map(|&c| T::from_usize_lossy(c) / n).collect(),
            mu: self.centroids.clone(),
            sigma: (0..m)
                .map(|c| {
                    let var = if count[c] > 0 {
                        ss[c] / T::from_usize_lossy(count[c])
                    } else {
                        T::zero()
                    };
                    var.sqrt().max(sigma_floor)
                })
                .collect(),
        }
    }
}

fn nearest<T: Real>(y: T, centroids: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = (y - centroids[0]).abs();
    for (c, &mu) in centroids.iter().enumerate().skip(1) {
        let d = (y - mu).abs();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn distinct_count<T: Real>(values: &[T]) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    sorted.dedup();
    sorted.len()
}

/// Lloyd's algorithm on scalars, started from evenly spaced quantiles.
pub fn kmeans<T: Real>(values: &[T], m: usize, max_iter: usize) -> Result<KMeansResult<T>> {
    if m == 0 {
        return Err(invalid("k-means needs at least one cluster"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("k-means input contains non-finite values"));
    }
    let distinct = distinct_count(values);
    if distinct < m {
        return Err(Error::TooFewDistinct { distinct, classes: m });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    let mut centroids: Vec<T> = (0..m).map(|c| sorted[((2 * c + 1) * n) / (2 * m)]).collect();

    let mut assignments = vec![usize::MAX; n];
    let mut sse_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut sse = T::zero();
        for (a, &y) in assignments.iter_mut().zip(values) {
            let c = nearest(y, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
            let d = y - centroids[c];
            sse = sse + d * d;
        }
        sse_trace.push(sse);
        if !changed && iterations > 1 {
            break;
        }
        let mut sum = vec![T::zero(); m];
        let mut count = vec![0usize; m];
        for (&y, &c) in values.iter().zip(&assignments) {
            sum[c] = sum[c] + y;
            count[c] += 1;
        }
        for c in 0..m {
            if count[c] > 0 {
                centroids[c] = sum[c] / T::from_usize_lossy(count[c]);
            }
        }
        for c in 0..m {
            if count[c] == 0 {
                // reseed at the point farthest from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (values[a] - centroids[assignments[a]]).abs();
                        let db = (values[b] - centroids[assignments[b]]).abs();
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
                    })
                    .expect("non-empty input");
                centroids[c] = values[far];
                assignments[far] = c;
            }
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .partial_cmp(&centroids[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank = vec![0; m];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    Ok(KMeansResult {
        centroids: order.iter().map(|&o| centroids[o]).collect(),
        assignments: assignments.iter().map(|&a| rank[a]).collect(),
        iterations,
        sse_trace,
    })
}

#[derive(Clone, Debug)]
pub struct GmmFit<T> {
    pub theta: GlobalTheta<T>,
    /// Log-likelihood of each iterate, starting with the initial parameters.
    pub loglik_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Components whose responsibility mass vanished or whose scale hit the floor.
    pub collapsed: Vec<usize>,
}

/// Classical EM for a constant-parameter mixture. Stops when the largest
/// parameter change drops below `tol`.
pub fn gmm_fit_global<T: Real>(
    values: &[T],
    init: &GlobalTheta<T>,
    tol: T,
    max_iter: usize,
    sigma_floor: T,
) -> Result<GmmFit<T>> {
    init.validate()?;
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(sigma_floor > T::zero()) {
        return Err(invalid("sigma floor must be positive"));
    }
    let m = init.components();
    let n = T::from_usize_lossy(values.len());
    let mut theta = init.clone();
    let mut w = vec![T::zero(); m];
    let mut loglik_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut collapsed = Vec::new();

    loop {
        let mut mass = vec![T::zero(); m];
        let mut first = vec![T::zero(); m];
        let mut ll = T::zero();
        for &y in values {
            theta.log_weights(y, &mut w);
            let lse = log_sum_exp(&w);
            ll = ll + lse;
            for c in 0..m {
                let r = (w[c] - lse).exp();
                mass[c] = mass[c] + r;
                first[c] = first[c] + r * y;
            }
        }
        loglik_trace.push(ll);
        if converged || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut next = theta.clone();
        for c in 0..m {
            next.pi[c] = mass[c] / n;
            if mass[c] > T::zero() {
                next.mu[c] = first[c] / mass[c];
            }
        }
        let mut second = vec![T::zero(); m];
        for &y in values {
            theta.log_weights(y, &mut w);
            let lse = log_sum_exp(&w);
            for c in 0..m {
                let d = y - next.mu[c];
                second[c] = second[c] + (w[c] - lse).exp() * d * d;
            }
        }
        for c in 0..m {
            if mass[c] > T::zero() {
                next.sigma[c] = (second[c] / mass[c]).sqrt().max(sigma_floor);
            }
            if (!(mass[c] > T::zero()) || next.sigma[c] <= sigma_floor) && !collapsed.contains(&c) {
                collapsed.push(c);
            }
        }
        let delta = (0..m)
            .map(|c| {
                (next.pi[c] - theta.pi[c])
                    .abs()
                    .max((next.mu[c] - theta.mu[c]).abs())
                    .max((next.sigma[c] - theta.sigma[c]).abs())
            })
            .fold(T::zero(), T::max);
        theta = next;
        converged = delta < tol;
    }
    if !collapsed.is_empty() {
        log::warn!("global GMM: degenerate components {collapsed:?}");
    }
    Ok(GmmFit {
        theta: theta.sorted_by_mean(),
        loglik_trace,
        iterations,
        converged,
        collapsed,
    })
}

/// Fits k-means, then runs EM from its centroids, shares and within-cluster scales.
pub fn gmm_fit_from_kmeans<T: Real>(
    values: &[T],
    m: usize,
    tol: T,
    max_iter: usize,
    sigma_floor: T,
) -> Result<GmmFit<T>> {
    let km = kmeans(values, m, max_iter.max(100))?;
    gmm_fit_global(values, &km.to_theta(values, sigma_floor), tol, max_iter, sigma_floor)
}

/// Constant prediction `Σ_m π_m μ_m`.
pub fn baseline_predict<T: Real>(theta: &GlobalTheta<T>) -> T {
    theta.pi.iter().zip(&theta.mu).map(|(&p, &u)| p * u).sum()
}

/// Broadcasts constant parameters onto every voxel.
pub fn baseline_field<T: Real>(theta: &GlobalTheta<T>, dims: Dims) -> Result<ParameterField<T>> {
    ParameterField::constant(dims, &theta.pi, &theta.mu, &theta.sigma)
}

/// Posterior-argmax labels (1-based) under a constant mixture.
pub fn gmm_labels<T: Real>(v: &Volume3D<T>, theta: &GlobalTheta<T>) -> Result<LabelVolume> {
    let labels = v.data().iter().map(|&y| (theta.classify(y) + 1) as u8).collect();
    LabelVolume::new(v.dims(), labels, theta.components())
}

/// Nearest-centroid labels (1-based); ties go to the smaller index.
pub fn nearest_centroid_labels<T: Real>(v: &Volume3D<T>, centroids: &[T]) -> Result<LabelVolume> {
    if centroids.is_empty() {
        return Err(invalid("no centroids"));
    }
    let labels = v.data().iter().map(|&y| (nearest(y, centroids) + 1) as u8).collect();
    LabelVolume::new(v.dims(), labels, centroids.len())
}
