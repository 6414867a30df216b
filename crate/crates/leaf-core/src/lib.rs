//! Confounder-aware distillation for miniature sequence models.
//!
//! The library trains a small causal next-token teacher/student pair on a
//! synthetic task with planted spurious tokens, locates those tokens by
//! contrasting teacher and student input-gradient sensitivities, builds
//! counterfactual samples by deleting the detected spans, and distills the
//! student with a λ-blend of standard and counterfactual KL objectives.
//!
//! Modules, in dependency order:
//! - [`autodiff`]: reverse-mode gradients over dense f64 arrays
//! - [`model`]: the miniature attention model, training, decoding, saliency
//! - [`corpus`]: synthetic task generation with ground-truth confounders
//! - [`detect`]: attribution, thresholding, span pruning, baselines
//! - [`distill`]: KL objectives, response splitting, the distillation loop

pub mod audit;
pub mod autodiff;
pub mod corpus;
pub mod detect;
pub mod distill;
pub mod error;
pub mod model;
pub mod rng;

pub use error::{LeafError, Result};
