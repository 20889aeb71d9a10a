//! Separable truncated Gaussian kernel and the masked 3D convolution behind
//! every KEM sum.
//!
//! Tap `t` on axis `a` sits at integer offset `o` in `[-(s-1)/2, (s-1)/2]` and
//! equals `K(o / (h * d_a))` with `K` the standard normal density, so the 3D
//! weight of an offset is the product of three taps. Taps are not normalized
//! and out-of-bounds neighbours contribute nothing; every consumer takes a
//! ratio of two convolutions over the same window.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::scalar::{std_normal_pdf, Real};
use crate::volume::{Dims, SampleMask, Volume3D};

/// Largest per-axis extent accepted by [`conv_direct_reference`].
pub const DIRECT_REFERENCE_MAX_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec<T> {
    h: T,
    s: usize,
    dims: Dims,
    taps: [Vec<T>; 3],
}

/// Builds the per-axis taps for bandwidth `h` (unit-cube units) and odd filter size `s`.
pub fn make_kernel<T: Real>(h: T, s: usize, dims: Dims) -> Result<KernelSpec<T>> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(invalid(format!("bandwidth {h} must be positive")));
    }
    if s == 0 || s.is_multiple_of(2) {
        return Err(invalid(format!("filter size {s} must be odd and positive")));
    }
    let radius = (s / 2) as isize;
    let taps = [0, 1, 2].map(|a| {
        let scale = h * T::from_usize_lossy(dims.axis(a));
        (-radius..=radius)
            .map(|o| std_normal_pdf(T::lit(o as f64) / scale))
            .collect::<Vec<T>>()
    });
    if taps.iter().flatten().any(|&t| !(t > T::zero())) {
        return Err(invalid(format!(
            "filter size {s} is too wide for bandwidth {h}: outer taps underflow to zero"
        )));
    }
    Ok(KernelSpec { h, s, dims, taps })
}

impl<T: Real> KernelSpec<T> {
    #[inline]
    pub fn bandwidth(&self) -> T {
        self.h
    }

    #[inline]
    pub fn filter_size(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.s / 2
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Taps along axis 0, 1 or 2, ordered by ascending offset.
    pub fn taps(&self, axis: usize) -> &[T] {
        &self.taps[axis]
    }

    /// Truncated 3D weight for an integer offset; zero outside the window.
    pub fn weight(&self, offset: [isize; 3]) -> T {
        let r = self.radius() as isize;
        if offset.iter().any(|o| o.abs() > r) {
            return T::zero();
        }
        (0..3)
            .map(|a| self.taps[a][(offset[a] + r) as usize])
            .fold(T::one(), |acc, t| acc * t)
    }

    pub fn center_weight(&self) -> T {
        self.weight([0, 0, 0])
    }

    /// Same kernel rebuilt for another grid.
    pub fn for_dims(&self, dims: Dims) -> Result<Self> {
        make_kernel(self.h, self.s, dims)
    }
}

/// Masked kernel-weighted sum at every voxel: Σ over sampled neighbours of
/// `K*((X_i - x)/h) * field(X_i)`.
pub fn weighted_conv<T: Real>(field: &Volume3D<T>, kernel: &KernelSpec<T>, mask: &SampleMask) -> Result<Volume3D<T>> {
    let dims = field.dims();
    dims.check_same(&mask.dims())?;
    dims.check_same(&kernel.dims())?;
    let masked: Vec<T> = field
        .data()
        .iter()
        .zip(mask.as_slice())
        .map(|(&v, &inc)| if inc { v } else { T::zero() })
        .collect();
    Volume3D::from_vec(dims, convolve_separable(&masked, kernel))
}

/// Three 1D passes (x, then y, then z) over a field that is already zero at
/// unsampled voxels.
pub fn convolve_separable<T: Real>(data: &[T], kernel: &KernelSpec<T>) -> Vec<T> {
    let dims = kernel.dims();
    assert_eq!(data.len(), dims.len(), "field length does not match kernel grid");
    let mut a = vec![T::zero(); data.len()];
    let mut b = vec![T::zero(); data.len()];
    pass_x(data, &mut a, dims, kernel.taps(0));
    pass_y(&a, &mut b, dims, kernel.taps(1));
    pass_z(&b, &mut a, dims, kernel.taps(2));
    a
}

fn pass_x<T: Real>(src: &[T], dst: &mut [T], dims: Dims, taps: &[T]) {
    let (dx, r) = (dims.dx, taps.len() / 2);
    dst.par_chunks_mut(dx).zip(src.par_chunks(dx)).for_each(|(out, row)| {
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(dx - 1);
            let mut acc = T::zero();
            for n in lo..=hi {
                acc = acc + taps[n + r - i] * row[n];
            }
            *o = acc;
        }
    });
}

fn pass_y<T: Real>(src: &[T], dst: &mut [T], dims: Dims, taps: &[T]) {
    let (dx, dy, r) = (dims.dx, dims.dy, taps.len() / 2);
    let slab = dx * dy;
    dst.par_chunks_mut(slab)
        .zip(src.par_chunks(slab))
        .for_each(|(out, plane)| {
            out.fill(T::zero());
            for j in 0..dy {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(dy - 1);
                let out_row = &mut out[j * dx..(j + 1) * dx];
                for n in lo..=hi {
                    let t = taps[n + r - j];
                    let in_row = &plane[n * dx..(n + 1) * dx];
                    for (o, &v) in out_row.iter_mut().zip(in_row) {
                        *o = *o + t * v;
                    }
                }
            }
        });
}

fn pass_z<T: Real>(src: &[T], dst: &mut [T], dims: Dims, taps: &[T]) {
    let (dz, r) = (dims.dz, taps.len() / 2);
    let slab = dims.dx * dims.dy;
    dst.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        out.fill(T::zero());
        let lo = k.saturating_sub(r);
        let hi = (k + r).min(dz - 1);
        for n in lo..=hi {
            let t = taps[n + r - k];
            let plane = &src[n * slab..(n + 1) * slab];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = *o + t * v;
            }
        }
    });
}

/// Untruncated O(N²) kernel sum over every sampled voxel. Only for small
/// grids; used to check the truncated path.
pub fn conv_direct_reference<T: Real>(field: &Volume3D<T>, h: T, mask: &SampleMask) -> Result<Volume3D<T>> {
    let dims = field.dims();
    dims.check_same(&mask.dims())?;
    if dims.max_extent() > DIRECT_REFERENCE_MAX_EXTENT {
        return Err(invalid(format!(
            "direct reference limited to {DIRECT_REFERENCE_MAX_EXTENT} voxels per axis, got {:?}",
            dims.as_array()
        )));
    }
    if !(h > T::zero()) {
        return Err(invalid(format!("bandwidth {h} must be positive")));
    }
    // axis weight tables indexed by |offset|
    let table = |a: usize| -> Vec<T> {
        let scale = h * T::from_usize_lossy(dims.axis(a));
        (0..dims.axis(a))
            .map(|o| std_normal_pdf(T::from_usize_lossy(o) / scale))
            .collect()
    };
    let (wx, wy, wz) = (table(0), table(1), table(2));
    let samples: Vec<usize> = mask.indices().collect();
    let out = (0..dims.len())
        .map(|idx| {
            let c = dims.coord(idx);
            let mut acc = T::zero();
            for &q in &samples {
                let n = dims.coord(q);
                let w = wx[c.i.abs_diff(n.i)] * wy[c.j.abs_diff(n.j)] * wz[c.k.abs_diff(n.k)];
                acc = acc + w * field.data()[q];
            }
            acc
        })
        .collect();
    Volume3D::from_vec(dims, out)
}

/// Sum of all `s³` window weights.
pub fn window_mass<T: Real>(kernel: &KernelSpec<T>) -> T {
    (0..3)
        .map(|a| kernel.taps(a).iter().copied().sum::<T>())
        .fold(T::one(), |acc, s| acc * s)
}

pub(crate) fn check_kernel_dims<T: Real>(kernel: &KernelSpec<T>, dims: Dims) -> Result<()> {
    if kernel.dims() != dims {
        return Err(Error::DimsMismatch {
            expected: dims.as_array(),
            found: kernel.dims().as_array(),
        });
    }
    Ok(())
}
