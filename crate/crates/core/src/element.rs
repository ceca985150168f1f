//! Scalar types that can live in tensors.

use core::fmt::Debug;

/// A tensor element. Conversions go through `f64`, which is exact for every
/// implementor.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const ZERO: Self;

    fn to_f64(self) -> f64;

    /// Rounds to nearest (saturating for integers).
    fn from_f64(v: f64) -> Self;

    fn relu(self) -> Self;

    fn add_bias(self, bias: f32) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }

    fn add_bias(self, bias: f32) -> Self {
        self + bias
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }

    fn add_bias(self, bias: f32) -> Self {
        self + bias as f64
    }
}

macro_rules! int_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0;

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn from_f64(v: f64) -> Self {
                libm::round(v) as $t
            }

            fn relu(self) -> Self {
                self.max(0)
            }

            fn add_bias(self, bias: f32) -> Self {
                self.wrapping_add(libm::roundf(bias) as $t)
            }
        }
    };
}

int_element!(i16);
int_element!(i32);
int_element!(i64);
