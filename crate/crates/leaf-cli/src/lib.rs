//! Experiment harness around the core library: a staged, artifact-driven
//! pipeline (corpus → teacher → student → detection → counterfactuals →
//! distillation → metrics), an inference-time pruning pilot, and sweep
//! tables over threshold, blend weight, masking strategy, and splitting.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod schema;
