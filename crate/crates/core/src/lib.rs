//! Copy-augmented sequence-to-sequence translation of natural-language
//! questions into SPARQL, at desk scale.
//!
//! The pipeline: a template-driven generator produces (question, query) pairs
//! grounded in an in-memory triple store; questions are tagged with the KB
//! elements they mention; queries are encoded into a token-level intermediary
//! form; paired vocabularies isolate KB elements above a cutoff index; a
//! small transformer encoder-decoder is trained with a copy layer that lets
//! the decoder emit source-side KB tokens it has never seen in training; and
//! evaluation scores both surface overlap and the answers the generated
//! queries actually retrieve from the store.

pub mod autodiff;
pub mod codec;
pub mod copy;
pub mod dataset;
pub mod eval;
pub mod kb;
pub mod model;
pub mod toy;
pub mod vocab;

pub use kb::{AnswerSet, KnowledgeBase, SparqlQuery, Term, Triple};
pub use vocab::{VocabPair, Vocabulary};
