//! Kernel EM (KEM) for semiparametric Gaussian mixtures over dense 3D volumes.
//!
//! Every mixture parameter (class prior, mean, standard deviation) is a smooth
//! function of voxel position. The fit alternates a per-voxel E-step with
//! M-steps that are ratios of kernel-weighted local sums, all computed with a
//! separable truncated Gaussian convolution.
//!
//! The numeric core is generic over the scalar type ([`Real`]); the aliases
//! below fix it to `f64`, which is what the CLI and the file formats use.

// `!(x > 0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod kem;
pub mod kernel;
pub mod metrics;
pub mod phantom;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;
pub use volume::{Dims, LabelVolume, MaskRole, ParameterField, SampleMask, Volume3D, VoxelCoord};

/// Dense volume of 64-bit values.
pub type Volume = volume::Volume3D<f64>;
/// Dense volume of 32-bit values.
pub type Volume32 = volume::Volume3D<f32>;
/// Per-voxel mixture parameters in 64-bit precision.
pub type Params = volume::ParameterField<f64>;
/// Per-voxel mixture parameters in 32-bit precision.
pub type Params32 = volume::ParameterField<f32>;
/// Separable truncated Gaussian kernel in 64-bit precision.
pub type Kernel = kernel::KernelSpec<f64>;
/// KEM configuration in 64-bit precision.
pub type Config = kem::FitConfig<f64>;
/// Constant-parameter mixture in 64-bit precision.
pub type GlobalParams = baselines::GlobalTheta<f64>;
