//! Divide-and-conquer Gaussian splatting for large scenes.

pub mod appearance;
pub mod camera;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod ingest;
pub mod metrics;
pub mod partition;
pub mod ray;
pub mod render;
pub mod sh;
pub mod split;
pub mod stitch;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// The guide in `book/`, compiled so that its examples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/appearance.md")]
    mod appearance {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
