use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over (`f32` or `f64`).
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl<T> Real for T where
    T: Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    (-(z * z) / two).exp() / (two * T::PI()).sqrt()
}

/// Natural log of the standard normal density.
#[inline]
pub fn std_normal_ln_pdf<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    -(z * z) / two - (two * T::PI()).ln() / two
}
