use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dims;
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRole {
    Train,
    Test,
    Subsample,
}

/// Set of voxels used as samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMask {
    dims: Dims,
    included: Vec<bool>,
    ratio: f64,
    role: MaskRole,
}

impl SampleMask {
    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            included: vec![true; dims.len()],
            ratio: 1.0,
            role: MaskRole::Subsample,
        }
    }

    pub fn from_bools(dims: Dims, included: Vec<bool>, role: MaskRole) -> Result<Self> {
        if included.len() != dims.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                found: included.len(),
            });
        }
        let count = included.iter().filter(|&&b| b).count();
        let ratio = count as f64 / dims.len() as f64;
        Ok(Self {
            dims,
            included,
            ratio,
            role,
        })
    }

    fn from_indices(dims: Dims, indices: impl IntoIterator<Item = usize>, ratio: f64, role: MaskRole) -> Self {
        let mut included = vec![false; dims.len()];
        for idx in indices {
            included[idx] = true;
        }
        Self {
            dims,
            included,
            ratio,
            role,
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.included[idx]
    }

    #[inline]
    pub fn as_slice(&self) -> &[bool] {
        &self.included
    }

    /// Requested sampling ratio.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// Flat indices of included voxels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.included.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
    }

    /// 0/1 indicator field.
    pub fn indicator<T: Real>(&self) -> Vec<T> {
        self.included
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }

    pub fn complement(&self, role: MaskRole) -> Self {
        Self {
            dims: self.dims,
            included: self.included.iter().map(|b| !b).collect(),
            ratio: 1.0 - self.ratio,
            role,
        }
    }

    /// Values of `data` at included voxels, in index order.
    pub fn gather<T: Copy>(&self, data: &[T]) -> Vec<T> {
        self.indices().map(|i| data[i]).collect()
    }
}

fn sample_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).round() as usize).min(total)
}

/// Random train/test partition; `train_fraction` of the voxels go to training.
pub fn split_train_test(dims: Dims, train_fraction: f64, seed: u64) -> Result<(SampleMask, SampleMask)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, n, sample_count(n, train_fraction));
    let train = SampleMask::from_indices(dims, picked, train_fraction, MaskRole::Train);
    let test = train.complement(MaskRole::Test);
    Ok((train, test))
}

/// Uniform subsample of `r * 100%` of the voxels, without replacement.
pub fn subsample_mask(dims: Dims, r: f64, seed: u64) -> Result<SampleMask> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid(format!("sampling ratio {r} not in (0, 1]")));
    }
    let n = dims.len();
    if r == 1.0 {
        return Ok(SampleMask::full(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, n, sample_count(n, r));
    Ok(SampleMask::from_indices(dims, picked, r, MaskRole::Subsample))
}
