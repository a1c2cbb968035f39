//! Expression alignment and iterative pseudo-labelling for open-vocabulary
//! grounding detectors.
//!
//! The detector itself is an external process reached through
//! [`detector::DetectorClient`]. This crate picks a referential expression
//! per category from a handful of annotated shots ([`expressions`]), grows a
//! training set from confident predictions ([`pseudolabel`]), and scores the
//! result COCO-style ([`evaluation`]).

pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod expressions;
pub mod geometry;
pub mod pipeline;
pub mod pseudolabel;

pub use error::{Error, Result};
