//! Antibody and antigen interface prediction with a three-branch Conformer
//! and sliding attention between chains.
//!
//! Start from [`model::predict`] for inference, [`train::train_loop`] for
//! training and [`sliding::run_sliding`] for the attention mechanism on its
//! own. The guide in `book/` walks through each part.

pub mod batch;
pub mod config;
pub mod conformer;
pub mod data;
pub mod encoding;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sliding;
pub mod tape;
pub mod train;

pub use batch::{pad_batch, Batch, ChainInput, ChainRole, RoleBatch, SampleInput, TokenMask};
pub use config::Config;
pub use error::{Error, Result};

// Runs the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sliding.md")]
    mod sliding {}
    #[doc = include_str!("../../../book/src/conformer.md")]
    mod conformer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
