//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Images are NHWC and convolution kernels are `[k, k, C_in, C_out]`,
//! optionally with a leading per-sample axis. Everything is generic over
//! [`Real`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference checks.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;

pub use graph::{Gradients, Graph, Var};
pub use ops::{concat, stack};
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
