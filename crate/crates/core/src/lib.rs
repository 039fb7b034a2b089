//! SVD-guided knowledge distillation for cross-modal re-identification
//! embeddings at desk scale.
//!
//! The crate covers the full loop: synthetic teacher generation with a
//! controlled low-rank spectrum ([`synth`]), spectrum analysis and principal
//! bases ([`spectral`]), composite ReID and distillation objectives with
//! analytic gradients ([`losses`]), a trainable student with optional
//! hierarchical low-rank adapters ([`student`]), and Rank-k/mAP/mINP
//! retrieval evaluation ([`eval`]). Everything is deterministic under a
//! fixed seed.

pub mod data;
pub mod error;
pub mod losses;
pub mod spectral;

pub use data::{
    load_embedding_set, sample_batch, save_embedding_set, Batch, EmbeddingSet, FileFormat,
    Modality, SampleMeta,
};
pub use error::{Error, Result};
