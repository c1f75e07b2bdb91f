//! The guide in `book/src`, one module per chapter, so `cargo test` runs
//! every listing as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}
#[doc = include_str!("../../../book/src/kernel.md")]
pub mod kernel {}
#[doc = include_str!("../../../book/src/feedback-matrices.md")]
pub mod feedback_matrices {}
#[doc = include_str!("../../../book/src/injection.md")]
pub mod injection {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
