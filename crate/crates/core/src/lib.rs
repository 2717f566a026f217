//! Few-shot class-incremental classification over frozen embeddings.
//!
//! A relation scorer is trained once on the base task and then frozen. New
//! classes are absorbed without any parameter update through a dual
//! key-value cache: entropy-gated pseudo-labelled base test features and the
//! K labelled shots of every novel class. The crate also carries the session
//! protocol, the evaluation metrics, and the file formats used by the `tfa`
//! command-line tool.

pub mod adaptor;
pub mod alignment;
pub mod embedding;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod rng;

pub use adaptor::{BaseUpdatePolicy, DualCache, InsertOutcome};
pub use alignment::{RelationParams, SimilarityVector, TrainConfig};
pub use embedding::{ClassPrototype, EmbeddingSet, PrototypeSet, SynthConfig};
pub use metrics::ExperimentReport;
pub use protocol::ExperimentConfig;
