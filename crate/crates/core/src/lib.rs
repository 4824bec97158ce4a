//! Recursive neural networks over jet clustering trees.
//!
//! Particle lists are clustered into binary trees ([`clustering`]), embedded
//! bottom-up by a simple or gated recursive network ([`treenn`]), optionally
//! aggregated over the jets of an event by a GRU, and classified
//! ([`model`]). Gradients come from a small reverse-mode tape
//! ([`autodiff`]); [`eval`] turns scores into ROC curves.
//!
//! ```
//! use jetrec::clustering::cluster;
//! use jetrec::datagen::{generate, GenConfig};
//!
//! let jets = generate(&GenConfig { n_jets: 4, seed: 1, ..GenConfig::default() })?;
//! let tree = cluster(&jets[0].particles, 1.0, 1.0)?;
//! assert_eq!(tree.nodes.len(), 2 * jets[0].particles.len() - 1);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod autodiff;
pub mod clustering;
pub mod datagen;
pub mod eval;
pub mod kinematics;
pub mod model;
pub mod treenn;

// Compiles and runs the Rust snippets of the guide under `book/`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/embedding.md")]
    mod embedding {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
