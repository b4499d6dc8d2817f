//! Knowledge-graph enhanced radiology report generation at desk scale.
//!
//! The pipeline mirrors a classify-then-generate reading routine: a prior
//! knowledge graph is mined from report text, chest X-ray features initialize
//! its node representations, a graph convolution network propagates them, and
//! two heads consume the result — a multi-label finding classifier and a
//! two-level (topic/word) recurrent report decoder. Evaluation covers
//! BLEU-1..4, ROUGE-L, CIDEr with bootstrap confidence intervals.

pub mod classifier;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};

pub use tensor::{Tape, Tensor, TensorId};
