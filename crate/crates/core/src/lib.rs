//! Context subspaces for retrieval heads.
//!
//! A [`DescriptorBank`](bank::DescriptorBank) holds target descriptors. For
//! each training episode the nearest bank rows of the positive and negative
//! targets are summarized as a mean plus a low-rank basis
//! ([`embed`]), and a small head learns to predict those summaries
//! alongside its main output ([`model`], [`loss`]). [`eval`] measures
//! recall, [`synth`] produces seeded stand-in data and [`experiment`] wires
//! the pieces together.

pub mod atomic;
pub mod bank;
pub mod cli;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod search;
pub mod synth;

pub use error::{Error, Result};

// Book chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/bank-and-search.md")]
    mod bank_and_search {}
    #[doc = include_str!("../../../book/src/subspaces.md")]
    mod subspaces {}
    #[doc = include_str!("../../../book/src/losses-and-heads.md")]
    mod losses_and_heads {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
