//! Scalar abstraction so the whole pipeline runs in `f32` (default) or `f64`
//! (finite-difference gradient checks are unreliable in 32-bit).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which scalar a run is using. Recorded in checkpoints and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Floating scalar the numeric stack is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn to_f64x(self) -> f64;

    /// One standard-normal draw from `rng`.
    fn standard_normal<R: Rng>(rng: &mut R) -> Self;

    /// One uniform draw from `[0, 1)`.
    fn uniform_01<R: Rng>(rng: &mut R) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64x(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64x(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

/// Shorthand used all over: lift an `f64` literal into `T`.
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x)
}
