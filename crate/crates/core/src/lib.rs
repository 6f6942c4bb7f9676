//! Measuring and reducing identity-term bias in small autoregressive
//! language models.
//!
//! The crate covers the full loop: expanding counterfactual sentence pairs
//! from templates and an identity lexicon, training a small transformer (full
//! weights, low-rank adapters, or soft prompts), scoring pairs with built-in
//! or external backends, turning pair deltas into bias metrics, and testing
//! pre/post differences for significance.

pub mod adapters;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod external;
pub mod lexicon;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod scoring;
pub mod stats;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
