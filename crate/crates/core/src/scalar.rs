//! Floating-point abstraction for the numeric kernels.

use std::fmt::{Debug, Display};

/// Bound for everything that does float math in this crate.
///
/// `FromPrimitive` is required so deterministic `f64` random streams can be
/// narrowed to the working precision in one place instead of threading
/// distribution bounds through every sampler.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` literals and RNG draws.
    fn from_f64_lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
