//! Graph-based semi-supervised text classification.
//!
//! Documents are cleaned and tokenized ([`corpus`]), mapped through a frozen
//! pretrained embedding table ([`embedding`]), and linked into a k-nearest
//! neighbour similarity graph over their averaged word vectors ([`graph`]).
//! A convolutional classifier ([`model`], built on the primitives in [`nn`])
//! is trained on the labeled documents while a second branch learns to
//! predict graph and label context drawn by [`sampler`]. The [`trainer`]
//! alternates the two objectives and early-stops on development-set
//! weighted F1.
//!
//! Inference never touches the graph: a trained model classifies documents
//! it has never seen.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
