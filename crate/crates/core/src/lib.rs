//! Iterative confidence-filtered pseudo-labeling for CTC speech recognition.
//!
//! The crate covers the whole loop at desk scale: a synthetic corpus
//! generator, a character n-gram language model, CTC training of a small
//! acoustic model, prefix beam search with shallow fusion, confidence
//! filtering of pseudo-labels and WER/CER evaluation.

pub mod acoustic;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod fsutil;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod scenario;
pub mod selftrain;
pub mod vocab;

pub use vocab::{Vocabulary, BLANK};
