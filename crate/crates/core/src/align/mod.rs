//! From generated text back to document-level predictions: parse triple
//! lines, align entity strings to document entities, and resolve relation
//! strings against the inventory, optionally mapping out-of-domain
//! relations onto their nearest neighbour by embedding similarity.

pub mod assemble;
pub mod fuzzy;
pub mod parse;
pub mod relation;

pub use assemble::{
    assemble_predictions, Assembled, AlignmentConfig, OodAligner, Prediction, Provenance, RejectReason, Rejection,
    SubmissionRecord,
};
pub use fuzzy::{align_entity, token_sort_ratio, EntityMatch};
pub use parse::{parse_response, LineRejection, RawTriple, RejectedLine, SourceRef};
pub use relation::{
    align_out_of_domain, align_relation, cosine, Embedder, HashingEmbedder, OutOfDomainAlignment,
    RelationEmbeddings, RelationMatch, TableEmbedder,
};
