//! Scalar abstraction for the analog path.
//!
//! Every voltage, capacitance and ratio in the charge-domain models is carried
//! as a `Scalar`. `f64` is the reference type; `f32` builds are supported for
//! throughput experiments at the cost of sub-microvolt resolution.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or parameter.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Compensated (Kahan-Babuska-Neumaier) sum in iteration order.
    fn compensated_sum<I: IntoIterator<Item = Self>>(iter: I) -> Self {
        let mut sum = Self::zero();
        let mut comp = Self::zero();
        for x in iter {
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp = comp + ((sum - t) + x);
            } else {
                comp = comp + ((x - t) + sum);
            }
            sum = t;
        }
        sum + comp
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Boltzmann constant in J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
