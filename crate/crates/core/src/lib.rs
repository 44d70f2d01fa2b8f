//! Training a grid detector on merged, partially-labelled detection datasets.
//!
//! Several fully-labelled datasets with disjoint object-of-interest sets are
//! merged into one dataset whose images miss the labels of the other sets.
//! The detector is trained on the merged data while a rejection-capable proxy
//! classifier turns confident, unlabelled detections into soft pseudo-labels
//! on the fly, replacing the false "background" signal those instances would
//! otherwise produce.

pub mod datasets;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod proxy;
pub mod pseudolabel;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
