//! Spatio-temporal attention for tactile texture recognition.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a tape-based reverse-mode engine.
//! * [`model`]: CNN backbone, spatial attention gate, temporal self-attention
//!   heads and the linear classifier, in three ablation variants.
//! * [`data`]: a procedural generator of GelSight-like tactile sequences,
//!   contact-onset detection and the on-disk dataset format.
//! * [`train`]: SGD training, evaluation and the ablation grid.
//! * [`explain`]: Grad-CAM saliency, attention inspection and PGM export.
//! * [`config`]: the `key = value` run configuration used by the CLI.
//! * [`io`]: write-then-rename file output.

pub mod config;
pub mod data;
pub mod explain;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
