//! Scalar abstraction: the numerical core is generic over `f32`/`f64`.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the engine.
///
/// Blanket-implemented; covers `f32` and `f64`.
pub trait Real:
    nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync
{
}

impl<T> Real for T where
    T: nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync
{
}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn cst<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Sum a scalar iterator without requiring `std::iter::Sum`.
#[inline]
pub fn sum<T: Real, I: IntoIterator<Item = T>>(iter: I) -> T {
    iter.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Machine epsilon of the working scalar, probed at runtime.
pub fn machine_epsilon<T: Real>() -> T {
    let mut eps = T::one();
    let half = cst::<T>(0.5);
    while T::one() + eps * half > T::one() {
        eps *= half;
    }
    eps
}
