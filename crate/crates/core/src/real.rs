use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating point scalar used by the model. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Real: NdFloat + FromPrimitive + Default {
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
