//! Minimal differentiable layer set: forward and hand-written backward passes
//! for the layers the two networks use, Adam, and a finite-difference checker.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for gradient verification.

mod gemm;
pub mod gradcheck;
pub mod latent;
pub mod ops;
pub mod params;
pub mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use gradcheck::{grad_check, grad_check_at, grad_check_piecewise, GradCheckReport};
pub use latent::{
    clamp_logvar, kl_divergence, kl_divergence_backward, reparameterize, reparameterize_backward,
    reparameterize_with_noise, LatentCode, LOGVAR_CLAMP,
};
pub use params::{adam_step, AdamConfig, Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;

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
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Train/eval switch for dropout and batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
