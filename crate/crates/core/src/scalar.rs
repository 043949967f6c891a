//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the crate: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Relative off-diagonal threshold at which the Jacobi eigensolver stops.
    const EIG_TOL: f64;
    /// Absolute tolerance used when checking symmetry of an input matrix.
    const SYM_TOL: f64;

    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const EIG_TOL: f64 = 1e-12;
    const SYM_TOL: f64 = 1e-12;
}

impl Scalar for f32 {
    const EIG_TOL: f64 = 1e-6;
    const SYM_TOL: f64 = 1e-5;
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Swish with unit slope: `x * sigmoid(x)`.
#[inline]
pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`swish`]: `σ(x) + x σ(x) (1 − σ(x))`.
#[inline]
pub fn swish_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
