//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of tensors. `f32` is the training default; `f64` is used
/// wherever finite-difference comparisons need the extra precision.
pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Conversions of small constants (learning
    /// rates, augmentation ranges) are exact enough for both instantiations.
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 converts to every Scalar")
    }

    /// Widening conversion to `f64` for reporting and statistics.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }

    /// The next representable value one step toward `target`. Returns `self`
    /// when the two are equal.
    fn step_toward(self, target: Self) -> Self;
}

impl Scalar for f32 {
    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() || target.is_nan() {
            return self;
        }
        if target > self {
            f32::from_bits(next_up_bits32(self.to_bits(), self))
        } else {
            f32::from_bits(next_down_bits32(self.to_bits(), self))
        }
    }
}

impl Scalar for f64 {
    fn step_toward(self, target: Self) -> Self {
        if self == target || self.is_nan() || target.is_nan() {
            return self;
        }
        if target > self {
            f64::from_bits(next_up_bits64(self.to_bits(), self))
        } else {
            f64::from_bits(next_down_bits64(self.to_bits(), self))
        }
    }
}

fn next_up_bits32(bits: u32, v: f32) -> u32 {
    if v >= 0.0 {
        if v == 0.0 { 1 } else { bits + 1 }
    } else if bits == 0x8000_0000 {
        1 // -0.0 -> smallest positive subnormal
    } else {
        bits - 1
    }
}

fn next_down_bits32(bits: u32, v: f32) -> u32 {
    if v <= 0.0 {
        if v == 0.0 { 0x8000_0001 } else { bits + 1 }
    } else {
        bits - 1
    }
}

fn next_up_bits64(bits: u64, v: f64) -> u64 {
    if v >= 0.0 {
        if v == 0.0 { 1 } else { bits + 1 }
    } else if bits == 0x8000_0000_0000_0000 {
        1
    } else {
        bits - 1
    }
}

fn next_down_bits64(bits: u64, v: f64) -> u64 {
    if v <= 0.0 {
        if v == 0.0 { 0x8000_0000_0000_0001 } else { bits + 1 }
    } else {
        bits - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_toward_moves_one_ulp() {
        let x = 0.72f32;
        let down = x.step_toward(0.0);
        assert!(down < x);
        assert_eq!(down.step_toward(1.0), x);

        let y = 1.0f64;
        assert!(y.step_toward(2.0) > y);
        assert_eq!(y.step_toward(y), y);
    }

    #[test]
    fn step_toward_crosses_zero() {
        let z = 0.0f32;
        assert!(z.step_toward(1.0) > 0.0);
        assert!(z.step_toward(-1.0) < 0.0);
    }
}
