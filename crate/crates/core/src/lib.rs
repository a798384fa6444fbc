//! Two-stage document-level relation extraction.
//!
//! A trained proposal model first filters the quadratic space of ordered
//! entity pairs down to pairs likely to express a relation ([`rcp`]). The
//! surviving pairs are rendered into prompts ([`prompting`]), sent to a
//! language model ([`backend`]), and the generated triples are parsed and
//! aligned back to document entities and the relation inventory
//! ([`align`]) before scoring ([`eval`]).

pub mod align;
pub mod backend;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod prompting;
pub mod pipeline;
pub mod rcp;
pub mod synthetic;

pub use error::{Error, Result};
