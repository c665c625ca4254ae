//! Cross-domain few-shot fine-tuning toolkit.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`diffcore`]), a seedable image augmentation pipeline ([`imageaug`]),
//! N-way K-shot episode sampling with pseudo query generation
//! ([`episodes`]), the fine-tuning losses ([`losses`]), the backbone and
//! cosine mean-centroid classifier ([`fewshot`]) and an episodic evaluation
//! harness with confidence intervals and paired ablations ([`evalharness`]).

pub mod diffcore;
pub mod episodes;
pub mod error;
pub mod evalharness;
pub mod fewshot;
pub mod imageaug;
pub mod losses;
pub mod ppm;

pub use error::{Error, Result};
