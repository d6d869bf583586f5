//! Scalar abstraction for the numeric kernels (similarities, scores,
//! metrics). Everything is written against [`Real`] and instantiated at
//! `f64` through the crate-root aliases.

use num_traits::{Float, FromPrimitive};

pub trait Real: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn from_usize_(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in scalar")
    }
    fn from_f64_(x: f64) -> Self {
        Self::from_f64(x).expect("f64 fits in scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}
