use super::{Dims, Volume3D};
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Per-voxel mixture parameters: `M` prior, mean and standard-deviation fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterField<T> {
    pub pi: Vec<Volume3D<T>>,
    pub mu: Vec<Volume3D<T>>,
    pub sigma: Vec<Volume3D<T>>,
}

impl<T: Real> ParameterField<T> {
    pub fn new(pi: Vec<Volume3D<T>>, mu: Vec<Volume3D<T>>, sigma: Vec<Volume3D<T>>) -> Result<Self> {
        let m = pi.len();
        if m == 0 {
            return Err(invalid("parameter field needs at least one component"));
        }
        if mu.len() != m {
            return Err(Error::ComponentMismatch(m, mu.len()));
        }
        if sigma.len() != m {
            return Err(Error::ComponentMismatch(m, sigma.len()));
        }
        let dims = pi[0].dims();
        for f in pi.iter().chain(&mu).chain(&sigma) {
            dims.check_same(&f.dims())?;
        }
        Ok(Self { pi, mu, sigma })
    }

    /// Spatially constant fields.
    pub fn constant(dims: Dims, pi: &[T], mu: &[T], sigma: &[T]) -> Result<Self> {
        let fill = |v: &[T]| v.iter().map(|&c| Volume3D::filled(dims, c)).collect();
        Self::new(fill(pi), fill(mu), fill(sigma))
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.pi[0].dims()
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    /// Largest deviation of `Σ_m π_m` from one over all voxels.
    pub fn simplex_defect(&self) -> T {
        (0..self.dims().len())
            .map(|idx| {
                let s: T = self.pi.iter().map(|f| f.data()[idx]).sum();
                (s - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }

    pub fn min_sigma(&self) -> T {
        self.sigma
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .fold(T::infinity(), T::min)
    }

    /// Spatial average of each mean field.
    pub fn mean_mu(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.dims().len());
        self.mu
            .iter()
            .map(|f| f.data().iter().copied().sum::<T>() / n)
            .collect()
    }

    /// Component order that sorts classes by ascending average mean.
    pub fn ascending_order(&self) -> Vec<usize> {
        let means = self.mean_mu();
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal));
        order
    }

    /// Reorders components; `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let m = self.components();
        let mut seen = vec![false; m];
        if order.len() != m || !order.iter().all(|&o| o < m && !std::mem::replace(&mut seen[o], true)) {
            return Err(invalid(format!("{order:?} is not a permutation of 0..{m}")));
        }
        let pick = |f: &Vec<Volume3D<T>>| order.iter().map(|&o| f[o].clone()).collect();
        Self::new(pick(&self.pi), pick(&self.mu), pick(&self.sigma))
    }

    /// Maps mean and scale fields from normalized units back to `(min, max)`.
    pub fn denormalized(&self, range: (f64, f64)) -> Result<Self> {
        let (min, max) = range;
        if !(max > min) {
            return Err(Error::InvalidRange { min, max });
        }
        let (lo, span) = (T::lit(min), T::lit(max - min));
        Self::new(
            self.pi.clone(),
            self.mu.iter().map(|f| f.map(|u| u * span + lo)).collect(),
            self.sigma.iter().map(|f| f.map(|s| s * span)).collect(),
        )
    }

    /// Largest absolute difference across all fields.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let pairs = self
            .pi
            .iter()
            .zip(&other.pi)
            .chain(self.mu.iter().zip(&other.mu))
            .chain(self.sigma.iter().zip(&other.sigma));
        pairs
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()))
            .fold(T::zero(), T::max)
    }
}
