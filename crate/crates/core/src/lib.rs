//! Cross-learning for multi-task supervised learning.
//!
//! `N` task-specific parameter vectors are trained jointly while each is kept
//! within a radius `ε` of a shared central vector. `ε = 0` recovers consensus
//! (one model on the pooled data) and `ε = ∞` recovers independent per-task
//! training; intermediate radii trade bias for variance.
//!
//! - [`params`]: parameter vectors, bundles, the centrality radius, Gram tables.
//! - [`gaussian`]: the two-Gaussian-means instance with its exact MSE.
//! - [`projection`]: the constraint projection, solved by dual ascent.
//! - [`model`] and [`trainer`]: models, losses and projected SGD.
//! - [`data`]: synthetic multi-domain tasks, CSV ingestion, splitting.
//! - [`experiment`]: the sweeps behind the `crosslearn` command line tool.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod model;
pub mod params;
pub mod projection;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Centrality, ParamBundle, ParamVector};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/centrality.md")]
    mod centrality {}
    #[doc = include_str!("../../../book/src/gaussian.md")]
    mod gaussian {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
