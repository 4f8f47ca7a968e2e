//! Cascade re-annotation engine for detection-style image datasets.
//!
//! Stage 1 merges ground truth with extra detector output (thresholding and
//! class-aware NMS). Stage 2 reads and verifies text, describes every object
//! region, and links text to the smallest containing object. Stage 3 folds
//! all of it into a dense caption through an integrator LLM.

pub mod enrich;
pub mod error;
pub mod fixture;
pub mod gateway;
pub mod geometry;
pub mod ingest;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod templates;
pub mod tokenizer;

pub use error::{Error, Result};
