//! Cross-color person re-identification at desk scale: synthetic data, color
//! augmentation, a learned per-pixel color transform, a two-stream backbone
//! and retrieval evaluation, on a small reverse-mode autodiff core.

pub mod backbone;
pub mod cli;
pub mod color_aug;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod numerics;
pub mod pct;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/color-augmentation.md")]
    mod color_augmentation {}
    #[doc = include_str!("../../../book/src/color-transform.md")]
    mod color_transform {}
    #[doc = include_str!("../../../book/src/metric-loss.md")]
    mod metric_loss {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
