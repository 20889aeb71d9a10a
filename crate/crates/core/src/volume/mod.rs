//! Dense 3D volumes, voxel coordinates, sampling masks and file I/O.
//!
//! Storage is x-fastest: flat index `i + dx * (j + dy * k)`. Normalized voxel
//! positions are `((i+1)/dx, (j+1)/dy, (k+1)/dz)` and lie in `(0, 1]`.

mod io;
mod mask;
mod params;

pub use io::{kvol_paths, load_labels, load_metaimage, load_volume, store_labels, store_volume, Sidecar};
pub use mask::{split_train_test, subsample_mask, MaskRole, SampleMask};
pub use params::ParameterField;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Grid extents `(dx, dy, dz)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", try_from = "[usize; 3]")]
pub struct Dims {
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
}

impl Dims {
    pub fn new(dx: usize, dy: usize, dz: usize) -> Result<Self> {
        if dx == 0 || dy == 0 || dz == 0 {
            return Err(Error::InvalidDims([dx, dy, dz]));
        }
        Ok(Self { dx, dy, dz })
    }

    pub fn cube(d: usize) -> Result<Self> {
        Self::new(d, d, d)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dx * self.dy * self.dz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn as_array(&self) -> [usize; 3] {
        [self.dx, self.dy, self.dz]
    }

    /// Extent along axis 0, 1 or 2.
    #[inline]
    pub fn axis(&self, a: usize) -> usize {
        self.as_array()[a]
    }

    pub fn max_extent(&self) -> usize {
        self.dx.max(self.dy).max(self.dz)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dx && j < self.dy && k < self.dz);
        i + self.dx * (j + self.dy * k)
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> VoxelCoord {
        debug_assert!(idx < self.len());
        let i = idx % self.dx;
        let rest = idx / self.dx;
        VoxelCoord {
            i,
            j: rest % self.dy,
            k: rest / self.dy,
        }
    }

    pub fn check_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimsMismatch {
                expected: self.as_array(),
                found: other.as_array(),
            });
        }
        Ok(())
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl TryFrom<[usize; 3]> for Dims {
    type Error = Error;

    fn try_from(a: [usize; 3]) -> Result<Self> {
        Dims::new(a[0], a[1], a[2])
    }
}

/// Zero-based grid index of a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoxelCoord {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelCoord {
    /// Position in the unit cube, each component in `(0, 1]`.
    pub fn normalized<T: Real>(&self, dims: Dims) -> [T; 3] {
        [
            T::from_usize_lossy(self.i + 1) / T::from_usize_lossy(dims.dx),
            T::from_usize_lossy(self.j + 1) / T::from_usize_lossy(dims.dy),
            T::from_usize_lossy(self.k + 1) / T::from_usize_lossy(dims.dz),
        ]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.i, self.j, self.k]
    }
}

/// Dense scalar field on a 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T> {
    dims: Dims,
    data: Vec<T>,
    /// `(min, max)` of the data before [`normalize_to_unit`], if it was applied.
    pub value_range: Option<(f64, f64)>,
}

impl<T: Real> Volume3D<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            data,
            value_range: None,
        })
    }

    /// Like [`from_vec`](Self::from_vec) but also rejects NaN and infinities.
    pub fn from_vec_finite(dims: Dims, data: Vec<T>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Self::from_vec(dims, data)
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
            value_range: None,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    /// Builds a volume by evaluating `f` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(VoxelCoord) -> T) -> Self {
        let data = (0..dims.len()).map(|idx| f(dims.coord(idx))).collect();
        Self {
            dims,
            data,
            value_range: None,
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            value_range: self.value_range,
        }
    }

    pub fn cast<U: Real>(&self) -> Volume3D<U> {
        Volume3D {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            value_range: self.value_range,
        }
    }
}

/// Affine map onto `[0, 1]`; the original `(min, max)` is kept in `value_range`.
pub fn normalize_to_unit<T: Real>(v: &Volume3D<T>) -> Result<Volume3D<T>> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::ConstantVolume(lo.to_f64_lossy()));
    }
    let span = hi - lo;
    let mut out = v.map(|y| (y - lo) / span);
    out.value_range = Some((lo.to_f64_lossy(), hi.to_f64_lossy()));
    Ok(out)
}

/// Inverse of [`normalize_to_unit`] for the given range.
pub fn denormalize<T: Real>(v: &Volume3D<T>, range: (f64, f64)) -> Result<Volume3D<T>> {
    let (min, max) = range;
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidRange { min, max });
    }
    let (lo, span) = (T::lit(min), T::lit(max - min));
    let mut out = v.map(|y| y * span + lo);
    out.value_range = None;
    Ok(out)
}

/// Elementwise product with a binary {0,1} mask volume.
pub fn apply_mask<T: Real>(v: &Volume3D<T>, mask: &Volume3D<T>) -> Result<Volume3D<T>> {
    v.dims().check_same(&mask.dims())?;
    if let Some(index) = mask.data().iter().position(|&m| m != T::zero() && m != T::one()) {
        return Err(Error::NonBinaryMask { index });
    }
    let data = v.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
    let mut out = Volume3D::from_vec(v.dims(), data)?;
    out.value_range = v.value_range;
    Ok(out)
}

/// Dense field of class labels in `1..=classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
    classes: usize,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                found: labels.len(),
            });
        }
        if classes == 0 || classes > u8::MAX as usize {
            return Err(invalid(format!("class count {classes} out of range")));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l == 0 || l as usize > classes) {
            return Err(Error::InvalidLabel { index, label, classes });
        }
        Ok(Self { dims, labels, classes })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of voxels carrying each label, indexed by `label - 1`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    /// Renames labels through `map`, where `map[old - 1]` is the new label.
    pub fn relabel(&self, map: &[u8]) -> Result<Self> {
        if map.len() != self.classes {
            return Err(Error::ComponentMismatch(map.len(), self.classes));
        }
        let labels = self.labels.iter().map(|&l| map[l as usize - 1]).collect();
        Self::new(self.dims, labels, self.classes)
    }
}
