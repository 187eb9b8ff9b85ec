//! Few-shot multimodal prompt toolkit.
//!
//! The pipeline runs in five steps:
//!
//! 1. [`sampling`] draws few-shot train/dev splits whose class proportions
//!    follow the full dataset.
//! 2. [`retrieval`] picks one demonstration per label by embedding similarity.
//! 3. [`prompt`] renders multimodal cloze prompts from the built-in templates.
//! 4. A [`backend::Backend`] scores verbalizer words at the mask.
//! 5. [`fusion`] combines per-prompt posteriors, and [`metrics`] evaluates them.
//!
//! [`experiment::run_experiment`] wires everything together over several
//! seeds and repeats.

pub mod backend;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod prompt;
pub mod retrieval;
pub mod sampling;

pub use error::{Error, ErrorClass, Result};
