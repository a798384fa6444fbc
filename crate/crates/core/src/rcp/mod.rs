//! Relation candidate proposal: a binary classifier over the ordered
//! candidate space that estimates, per entity pair, the probability that
//! the pair expresses no relation.

pub mod checkpoint;
pub mod classifier;
pub mod encoder;
pub mod marking;
pub mod model;
pub mod pooling;
pub mod propose;
pub mod train;

pub use checkpoint::{Checkpoint, EncoderState};
pub use classifier::{bce_loss, pair_probability, RcpParams};
pub use encoder::{Encoder, Encoding, HashingEncoder, HashingEncoderSpec, TrainableEncoder};
pub use marking::{mark_entities, MarkedDocument};
pub use model::{score_document, ScoreDiagnostics};
pub use pooling::{entity_attention, entity_embedding, localized_context, LocalContext};
pub use propose::{parse_proposals, propose_candidates, write_proposals, ProposalFile};
pub use train::{train_rcp, RcpConfig, TrainOutcome};
