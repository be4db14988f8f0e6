//! Dense tensors, reverse-mode autodiff, Adam and gradient checking.
//!
//! Storage is `f32` ([`Tensor`], [`ParamStore`], optimizer moments); the
//! [`Tape`] computes in `f64` so finite-difference checks stay tight through
//! long chains.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, WarmupCosine};
pub use gradcheck::{grad_check, relative_error, GradCheck, GradCheckReport};
pub use params::{CensusEntry, ParamId, ParamStore};
pub use tape::{OpKind, PoolMode, Tape, Var};
pub use tensor::Tensor;


use rand::Rng;

/// Uniform `±1/√fan_in` initialisation.
pub fn init_uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, bound, rng).expect("initialiser shapes are positive")
}

#[cfg(test)]
mod tests;
