//! Scalar abstraction shared by the numeric modules.
//!
//! Statistics, transforms and quantizers are written once against [`Real`]
//! and instantiated for `f32` and `f64`. The codec itself runs in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; never fails for finite inputs.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    /// Widening conversion to `f64`.
    fn wide(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }

    /// Smallest tolerance the type can meaningfully resolve relative to 1.
    fn resolution(requested: f64) -> Self {
        Self::of(requested.max(Self::epsilon().wide()))
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major square matrix helpers used across modules.
pub(crate) fn mat_vec<T: Real>(m: &[T], n: usize, x: &[T], out: &mut [T]) {
    for (row, o) in m.chunks_exact(n).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
}

pub(crate) fn mat_t_vec<T: Real>(m: &[T], n: usize, y: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for (row, &yi) in m.chunks_exact(n).zip(y) {
        if yi == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
}
