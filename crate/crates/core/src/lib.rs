//! Detection and adaptive transfer of biased predicate annotations in
//! scene-graph relation datasets.
//!
//! The pipeline identifies annotated triplets an external model disagrees
//! with and unannotated (NA) pairs it believes are positive, learns
//! per-predicate prototypes with a robust contrastive objective, relabels
//! using prototype similarity as the transfer ratio, and resamples the
//! enhanced dataset toward scarce triplets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod embedding;
mod error;
pub mod pipeline;
pub mod prototype;
pub mod resample;
pub mod synth;
pub mod transfer;

pub use config::PipelineConfig;
pub use contrastive::{EncoderParams, LossBreakdown, TrainConfig};
pub use corpus::{
    ConfusionMatrix, Dataset, EntityRef, NaCandidate, PredicateId, PredicateVocab, PredictionRecord, Predictions,
    Provenance, RelationId, RelationInstance,
};
pub use embedding::{EmbeddingTable, EmbeddingVector};
pub use error::{Error, Result};
pub use pipeline::{Pipeline, Stage};
pub use prototype::{PrototypeConfig, PrototypeSpace, SimilarityMatrix};
pub use resample::RepeatPlan;
pub use transfer::{Move, MoveKind, ScarcityTable, TransferPlan};
