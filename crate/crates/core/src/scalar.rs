//! Generic scalar abstraction over the floating-point element type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point element type of all simulator math.
///
/// Everything downstream (vectors, mixing matrices, losses, bound
/// evaluators) is generic over this trait, so a whole experiment can run in
/// `f32` or `f64`. Random draws are routed through the trait so callers do
/// not need distribution bounds.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + std::str::FromStr<Err = std::num::ParseFloatError>
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// One standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Shorthand for embedding an `f64` constant.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant is representable")
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}
