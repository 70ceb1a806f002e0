//! Predictive embedding alignment over expert tool-use trajectories for a
//! miniature multimodal transformer, with the SFT and reconstruction-style
//! latent-reasoning baselines and the analysis tooling around them.

pub mod baselines;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod model;
pub mod objectives;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, PreparedExample, TokenSequence, VlmContext};
pub use tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId, Tensor};
