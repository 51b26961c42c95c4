//! Per-instance graph structure learning for skeleton-based gait
//! classification.
//!
//! An upstream network scores every candidate joint pair of a walking
//! sequence, a discrete adjacency is sampled from those scores with the
//! straight-through Gumbel-Softmax estimator, and a downstream
//! spatio-temporal graph convolutional network classifies the sequence on the
//! sampled graph. Both networks train jointly through the discrete step.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod data;
pub mod graph;
pub mod gumbel;
pub mod models;
pub mod training;
pub mod export;
pub mod cli;
