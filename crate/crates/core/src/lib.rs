//! Detection, scoring and ablation of attention heads that concentrate on
//! image tokens in multimodal transformers.
//!
//! The pipeline: per-sample answer-token attention is stored as ATND dumps
//! ([`atnd`]), reduced to per-head scalars ([`metrics`]), averaged over a
//! dataset ([`aggregate`]) and compared across models and datasets
//! ([`compare`]). [`toy`] provides a small decoder with planted image heads
//! that produces genuine dumps and supports zero-ablation experiments.

pub mod aggregate;
pub mod atnd;
pub mod compare;
pub mod error;
pub mod metrics;
pub mod seed;
pub mod toy;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    AttentionTensor, HeadId, MaskProvenance, MaskSpec, PromptVariant, QuestionType, Region, RegionMap, SampleMeta,
    SelectionRule, Stage,
};
