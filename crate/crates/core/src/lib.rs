//! Constituency trees from frozen language-model activations.
//!
//! Adjacent words are compared with a distance measure over either their
//! hidden states or their attention distributions; the sentence is split
//! recursively at the largest distance. The crate also reads bracketed
//! treebanks, scores induced trees, searches extractor/measure combinations
//! and trains a supervised linear distance scorer as an upper bound.

pub mod activations;
pub mod commands;
pub mod evaluation;
pub mod fideal;
pub mod inducer;
pub mod measures;
pub mod sexpr;
pub mod treebank;

pub use activations::{ActivationMeta, ExtractorSpec, Head, SentenceActivations};
pub use evaluation::{EvalReport, GridResult};
pub use fideal::{LinearScorer, TrainConfig};
pub use inducer::{BinTree, DistanceMeasure, DistanceVector};
pub use measures::{CosMode, MeasureId};
pub use treebank::{GoldTree, RawTree, Sentence};
