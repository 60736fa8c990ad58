//! Cross-modal token sieve for joint audio-visual token streams.
//!
//! The crate is a small, self-contained stack: a dense `f64` tensor core with
//! tape-based reverse-mode differentiation, multi-axis rotary position
//! encodings, a synthetic interleaved audio/video/text stream generator, the
//! sieve itself (bidirectional encoder, scorer, top-k selection with a
//! straight-through gate), a causal decoder, and a training/benchmark harness.

pub mod analysis;
pub mod bench;
pub mod config;
pub mod decoder;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod rope;
pub mod sieve;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{grad_check_fd, grad_check_many, Gradients, Tape, Var};
pub use tensor::Tensor;
