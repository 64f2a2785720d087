//! Intensification-aware sign language generation: gloss enhancement,
//! intensity tagging, counter-decoded pose generators, dynamic selection,
//! back-translation and evaluation metrics.

pub mod backtrans;
pub mod checkpoint;
pub mod corpus;
pub mod dynsel;
pub mod error;
pub mod eval;
pub mod intensify;
pub mod nn;
pub mod pose;
pub mod ptgen;
pub mod tagger;
pub mod train;

pub use error::{Error, Result};
