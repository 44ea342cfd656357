//! EntityNLM: a generative language model that jointly produces text and
//! the entity-mention structure threading through it.

pub mod corpus;
pub mod entity_state;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rerank;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
