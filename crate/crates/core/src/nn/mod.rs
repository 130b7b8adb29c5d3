//! Reverse-mode autodiff over `ndarray`, sized for this crate's estimator:
//! a growing tape of dynamic-dimension tensors, the op set needed by gated
//! convolutional U-Nets and multi-head attention, a named parameter store,
//! and Adam.
//!
//! Everything is generic over f32/f64; gradient correctness is pinned by
//! central finite differences in the op tests (f64).

mod ops;
mod params;
mod tape;

pub use ops::Conv2dCfg;
pub use params::{Adam, Bound, Init, ParamStore};
pub use tape::{cast, Scalar, Tape, Tid};
