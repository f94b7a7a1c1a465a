//! The guide in `book/` compiled as doctests, one module per chapter, so
//! `cargo test` fails when a code sample drifts from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/explain.md")]
pub mod explain {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
