//! Speech enhancement by cross-domain fusion of self-supervised embeddings
//! and spectrograms, followed by residual hybrid multi-attention blocks that
//! predict a time-frequency mask.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, a define-by-run autodiff tape, Adam and a
//!   finite-difference gradient checker.
//! * [`signal`]: WAV I/O, STFT/iSTFT, SNR mixing, SI-SNR and synthetic audio.
//! * [`embeddings`]: the layer-stack provider boundary and the learnable
//!   weighted sum over layers.
//! * [`layers`]: linear, convolution and layer-norm blocks bound to a
//!   parameter store.
//! * [`fusion`]: multi-scale cross-domain feature fusion (main branch plus
//!   three gate branches).
//! * [`rhma`]: multi-head self-attention, feed-forward blocks and the
//!   selective channel/time attention gates.
//! * [`model`]: end-to-end assembly, loss, training loop, inference and
//!   checkpoints.
//! * [`selfcheck`]: finite-difference gradient checks over primitives,
//!   modules and the full loss.

pub mod embeddings;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rhma;
pub mod selfcheck;
pub mod signal;

pub use error::{Error, Result};
