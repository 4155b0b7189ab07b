//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as tensor storage.
///
/// Reductions always accumulate in `f64` regardless of the storage type, so
/// `f32` models keep desk-scale accuracy while `f64` instantiations are used
/// for tight gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    /// Widening conversion to `f64`.
    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }

    /// Adjacent representable value in the direction of `target`.
    fn next_toward(self, target: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn next_toward(self, target: Self) -> Self {
                if self.is_nan() || target.is_nan() || self == target {
                    return self;
                }
                if self == 0.0 {
                    let tiny = <$t>::from_bits(1);
                    return if target > 0.0 { tiny } else { -tiny };
                }
                let bits = self.to_bits();
                // Moving away from zero increments the magnitude bits.
                let away = (target > self) == (self > 0.0);
                <$t>::from_bits(if away { bits + 1 } else { bits - 1 })
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
