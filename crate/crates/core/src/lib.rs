//! Transplant-then-regenerate text augmentation with LLMs, plus baselines,
//! diversity metrics and label auditing.

pub mod baselines;
pub mod dataset_io;
pub mod error;
pub mod label_tools;
pub mod llm_gateway;
pub mod metrics;
pub mod pipeline;
pub mod response;
pub mod ttr_engine;
pub mod types;

pub use error::{ConfigError, ParseFailure};
pub use types::{
    AugmentedSample, ContinuationMode, IobTag, LabelPayload, RunConfig, SeedSample, TaskType, TransplantContext,
};
