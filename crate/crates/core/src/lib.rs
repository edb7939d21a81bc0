//! Headlamp: a laboratory for the step-by-step behaviour of retrieval heads.
//!
//! The crate is organised by stage of the analysis pipeline:
//!
//! - [`model`]: an instrumented decoder-only transformer (random or hand-wired
//!   induction circuit) with head masking, token visibility and attention capture.
//! - [`score`]: per-step copy-paste and reasoning retrieval scores.
//! - [`dynamism`]: static rankings, Jaccard turnover and activation entropy.
//! - [`ablation`]: two-pass head ablation and progressive-k compensation studies.
//! - [`probe`]: temporal-offset CCA and MLP probes on final hidden states.
//! - [`dynrag`]: head-driven in-context retrieval with RIND-triggered regeneration.
//! - [`task`]: needle-in-a-haystack and multi-hop QA construction plus metrics.
//! - [`store`]: weight files, trace files, run configs and table exports.
//! - [`bridge`]: the `hlb/1` wire protocol for driving an external model.

pub mod ablation;
pub mod bridge;
pub mod dynamism;
pub mod dynrag;
mod error;
pub mod model;
pub mod probe;
pub mod score;
pub mod seed;
pub mod store;
pub mod task;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{
    Backend, GenerationTrace, HeadId, HeadLayout, Intervention, Model, ModelConfig,
    ModelDescriptor, StepOutput,
};
