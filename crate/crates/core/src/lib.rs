//! Second-order training of kernel logistic regression with randomized
//! Hessian approximations.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod objective;
pub mod optimize;
pub mod rng;

#[cfg(test)]
mod oracle;

pub use error::{Error, Result};

/// The guide's chapters, compiled so that every snippet runs as a doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/random-features.md")]
    mod random_features {}
    #[doc = include_str!("../../../book/src/newton-directions.md")]
    mod newton_directions {}
    #[doc = include_str!("../../../book/src/optimizers.md")]
    mod optimizers {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
