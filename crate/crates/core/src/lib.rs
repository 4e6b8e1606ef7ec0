//! Context-based apparent emotion recognition.
//!
//! Annotation types and corpus I/O, agreement and dataset statistics, a
//! synthetic data generator, the two-branch body + context network with its
//! multi-task losses, evaluation metrics and the training engine.

pub mod analysis;
pub mod annotation;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synthgen;
pub mod taxonomy;

pub use annotation::{aggregate_responses, AggregationPolicy, AnnotatorResponse, EmotionLabel, PersonAnnotation};
pub use dataset::{load_corpus, save_corpus, Corpus, Split};
pub use error::{Error, Result};
pub use taxonomy::{CategoryId, ContinuousDims, Dimension, NUM_CATEGORIES, NUM_DIMS};
