//! Finger-tapping screening from hand keypoint sequences.
//!
//! The crate covers the whole pipeline: keypoint ingestion and a synthetic
//! tapping generator ([`data`]), the hand skeleton graph ([`graph`]),
//! derived feature streams ([`streams`]), a small reverse-mode tensor engine
//! ([`numeric`]), spatio-temporal graph convolution networks with fixed or
//! adaptive adjacency ([`network`]), positive-unlabeled risk estimators
//! ([`risk`]), training ([`training`]), evaluation and significance testing
//! ([`eval`]), and the ablation experiment that ties them together
//! ([`experiment`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod graph;
pub mod network;
pub mod numeric;
pub mod risk;
pub mod streams;
pub mod training;

pub use error::{Error, Result};
