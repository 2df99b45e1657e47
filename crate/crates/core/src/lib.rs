//! Multi-domain recommendation with disentangled embeddings.
//!
//! Each user and item has one inter-domain embedding shared by all domains
//! and one intra-domain embedding per domain it appears in. Both are encoded
//! by a parameter-free graph propagation (GRec) over the domain interaction
//! graphs, concatenated and scored by inner product. Training uses BPR plus
//! an alignment term that pulls together the projected intra-domain
//! embeddings of cross-domain node pairs mined from random-walk stop counts
//! on the nodes shared between domains.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the `*64` aliases
//! below are the configurations used by the CLI and the test suites.

pub mod edmodel;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod mdgraph;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod table;
pub mod trainer;
pub mod walker;

pub use edmodel::{EdModel, Encoded, ModelSpec, ParamBlock, Representation};
pub use encoders::{EdgeMask, EncoderKind, GRecConfig};
pub use error::{Error, Result};
pub use evalkit::{EvalCase, EvalReport, EvalSet, Part, SplitDataset};
pub use mdgraph::{AnchorSet, DomainGraph, DomainId, Interaction, MultiDomainDataset, NodeId, NodeKind};
pub use pipeline::Variant;
pub use scalar::Scalar;
pub use synthgen::{SynthSpec, Synthetic};
pub use table::EmbeddingTable;
pub use trainer::{AdamState, EpochRecord, Gradients, TrainCallbacks, TrainConfig, TrainOutcome, Triplet};
pub use walker::{SimilarPair, SimilarPairSet, StopCountVector, WalkConfig, WalkProfiles};

pub type EdModel64 = EdModel<f64>;
pub type EdModel32 = EdModel<f32>;
pub type EmbeddingTable64 = EmbeddingTable<f64>;
pub type EmbeddingTable32 = EmbeddingTable<f32>;
