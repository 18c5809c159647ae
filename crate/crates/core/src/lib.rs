//! Detection and tracking on synthetic videos: a small two-frame network,
//! tube linking with rescoring, and per-frame mAP.
//!
//! The guide in `book/` walks through each module.

pub mod error;
pub mod evalmap;
pub mod geometry;
pub mod gradsuite;
pub mod linker;
pub mod objective;
pub mod pipeline;
pub mod records;
pub mod stages;
pub mod synthvid;
pub mod tensorops;
pub mod toynet;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/tensorops.md")]
    mod tensorops {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/synthvid.md")]
    mod synthvid {}
    #[doc = include_str!("../../../book/src/toynet.md")]
    mod toynet {}
    #[doc = include_str!("../../../book/src/linker.md")]
    mod linker {}
    #[doc = include_str!("../../../book/src/evalmap.md")]
    mod evalmap {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
