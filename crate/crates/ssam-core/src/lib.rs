//! Masked-spectrogram pretraining on selective state-space sequence blocks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`rng`] / [`autodiff`] — a minimal dense-tensor substrate with
//!   deterministic seeded randomness and reverse-mode differentiation. Every
//!   trainable operation carries a hand-written adjoint and is validated against
//!   central finite differences ([`autodiff::grad_check`]).
//! * [`ssm`] — the linear time-invariant structured state-space core: zero-order
//!   hold discretization, sequential recurrence, materialized convolution kernel,
//!   and their equivalence.
//! * [`scan`] — the input-conditioned (selective) scan: a strictly sequential
//!   reference, a chunked fast path built on the affine-map monoid, and the
//!   backward pass.
//! * [`block`] — the wide gated sequence block (expansion, causal depthwise
//!   convolution, selective scan, gating) plus its bidirectional variant.
//! * [`audio`] — log-mel spectrogram extraction and patchification.
//! * [`model`] — the masked-patch pretraining model: embedding, masking,
//!   encoder stack, reconstruction head, MSE objective.
//! * [`train`] — AdamW with warmup + cosine decay, the pretraining loop,
//!   checkpoints, and the shared binary tensor container ([`container`]).
//! * [`eval`] — chunked clip embeddings, the MLP probe, and the aggregated
//!   min-max normalized score.

pub mod audio;
pub mod autodiff;
pub mod block;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use error::{Result, SsamError};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
