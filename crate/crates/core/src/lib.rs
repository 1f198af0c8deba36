//! Mixtures of two Markov chains glued by a random matching.
//!
//! The crate builds the lifted chain on `2n` states and its projection,
//! measures mixing exactly, generates the matching tree lazily to estimate
//! drift, entropy and escape probabilities, and reproduces a biased-segment
//! example where a planted trap slows mixing down.

pub mod counterexample;
pub mod entropic;
pub mod error;
pub mod exact;
pub mod invariant;
pub mod linalg;
pub mod matrix;
pub mod mixing;
pub mod model;
pub mod quasitree;
pub mod rng;
pub mod stats;
pub mod topology;

pub use error::{Error, Result};
pub use matrix::StochasticMatrix;
pub use model::{Environment, LiftedKernel, MixtureSpec, PTable, ProjectedKernel};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/mixing.md")]
    pub mod mixing {}
    #[doc = include_str!("../../../book/src/paths.md")]
    pub mod paths {}
    #[doc = include_str!("../../../book/src/quasitree.md")]
    pub mod quasitree {}
    #[doc = include_str!("../../../book/src/invariant.md")]
    pub mod invariant {}
    #[doc = include_str!("../../../book/src/entropic.md")]
    pub mod entropic {}
    #[doc = include_str!("../../../book/src/counterexample.md")]
    pub mod counterexample {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
