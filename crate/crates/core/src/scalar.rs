//! Scalar abstraction used throughout the crate.
//!
//! All numeric kernels are generic over [`Real`], which is satisfied by
//! `f32` and `f64`. Concrete `f64` aliases live at the crate root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the solvers are generic over.
pub trait Real: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {
    /// Lossy conversion from `f64`, panicking only for non-representable NaN plumbing.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable in scalar type")
    }

    /// Lossy conversion back to `f64` for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
