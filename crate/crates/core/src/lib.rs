//! Outcome-predictive state abstractions for transfer in reinforcement learning.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod discovery;
pub mod domains;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod opsr;
pub mod options;
pub mod outcomes;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mdps.md")]
    mod mdps {}
    #[doc = include_str!("../../../book/src/abstraction.md")]
    mod abstraction {}
    #[doc = include_str!("../../../book/src/opsr.md")]
    mod opsr {}
    #[doc = include_str!("../../../book/src/options.md")]
    mod options {}
    #[doc = include_str!("../../../book/src/domains.md")]
    mod domains {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
