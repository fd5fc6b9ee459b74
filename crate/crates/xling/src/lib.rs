//! Cross-lingual word embeddings from jointly trained language models.
//!
//! The crate trains forward/backward LSTM language models of several
//! languages at once. The recurrent cells, the begin-of-sentence input
//! embedding and the end-of-sentence output row are shared by every
//! language, while word embeddings and output projections stay
//! language-specific. Training on monolingual text alone pushes the
//! per-language embeddings into one common space, which the alignment
//! module then evaluates with CSLS nearest-neighbor retrieval.

pub mod align;
pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod project;
pub mod serialization;
pub mod trainer;

pub use error::{Error, Result};
