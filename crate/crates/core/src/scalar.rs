//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! f32 or f64. Training and gradient checks use f64 (see the crate-root
//! aliases); f32 exists for compact file storage.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const EPSILON_DIV: Self;
}

impl Scalar for f32 {
    const EPSILON_DIV: f32 = 1e-12;
}

impl Scalar for f64 {
    const EPSILON_DIV: f64 = 1e-30;
}

/// Shorthand for lossy conversion of an f64 literal into the scalar type.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal not representable in scalar type")
}

/// Round-trip a scalar to f64 (exact for f32/f64).
#[inline]
pub fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar not representable as f64")
}
