//! Joint conversational discourse parsing and dropped pronoun recovery.
//!
//! A conversation snippet is encoded per utterance (embeddings + BiGRU), its
//! syntactic dependency trees are folded in with a gated directed GCN, a
//! biaffine scorer attaches every utterance to an earlier one with a typed
//! relation, a multi-relational GCN over that discourse graph feeds back into
//! token states, and an attention layer over the discourse-aware context
//! recovers the pronoun dropped before each token of the target utterance.
//! Everything runs on a small reverse-mode autodiff tape, so the whole model
//! is finite-difference checkable.

pub mod autodiff;
pub mod biaffine;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod recovery;
pub mod relgcn;
pub mod syngcn;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
