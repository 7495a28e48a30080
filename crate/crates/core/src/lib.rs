//! Zero- and few-shot node classification on text-attributed graphs.
//!
//! The pipeline scores every node text against every label with a masked
//! language model prompt, smooths the resulting score matrix over the graph,
//! standardizes each class column and predicts by argmax (zero-shot). With a
//! few labeled nodes per class, a shrinkage ensemble of small MLPs calibrates
//! those prior logits (few-shot).

pub mod backend;
pub mod calibrate;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod prompt;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::ScoreMatrix;
