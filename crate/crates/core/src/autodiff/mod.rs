//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the encoders, decoder, discriminators and loss
//! terms need; every op has a backward rule and the whole set is covered by
//! the finite-difference suite in `gradcheck`.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_multi, gradcheck_multi_coords};
pub use tape::{NodeId, SketchCoeffs, Tape};
pub use tensor::{check_finite_slice, numel_of, Tensor};
