//! Local structure preserving (LSP) regularization for robust classifiers.

mod checkpoint;
pub mod attack;
pub mod certify;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod structure;
pub mod train;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/structure.md")]
    mod structure {}
    #[doc = include_str!("../../../book/src/standard-training.md")]
    mod standard_training {}
    #[doc = include_str!("../../../book/src/adversarial-training.md")]
    mod adversarial_training {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/certification.md")]
    mod certification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
