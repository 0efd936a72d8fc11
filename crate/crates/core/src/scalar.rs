//! Scalar abstraction: everything numeric is generic over `Scalar`,
//! instantiated as `f32` for training and `f64` for gradient-check mode.

use crate::rng::Rng64;

/// Floating-point element type for tensors and parameters.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` literals and intermediate math.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> Scalar conversion")
    }

    /// Widen to `f64` for reductions and reporting.
    fn to_f64c(self) -> f64;

    /// Uniform draw in `[0, 1)` at this type's native precision, so a
    /// fixed seed yields bit-identical streams per concrete type.
    fn unit_from(rng: &mut Rng64) -> Self;
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }

    fn unit_from(rng: &mut Rng64) -> Self {
        rng.unit_f32()
    }
}

impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }

    fn unit_from(rng: &mut Rng64) -> Self {
        rng.unit_f64()
    }
}

/// Standard normal draw via Box-Muller on the type's own unit stream.
pub fn normal<F: Scalar>(rng: &mut Rng64) -> F {
    let u1 = F::unit_from(rng).max(F::c(1e-12));
    let u2 = F::unit_from(rng);
    let two_pi = F::c(std::f64::consts::TAU);
    (F::c(-2.0) * u1.ln()).sqrt() * (two_pi * u2).cos()
}
