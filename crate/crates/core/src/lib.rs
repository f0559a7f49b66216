//! Stage-wise ID embeddings for a frozen text-to-image diffusion model.
//!
//! A single frozen initializer token is expanded into per-stage K/V token
//! pairs, spliced into prompts and fed separately to the key and value
//! projections of every cross-attention layer. Training fits the expander
//! to one face image with a noise-prediction loss plus a face-wise attention
//! loss against a reference prompt.

pub mod attention_probe;
pub mod autodiff;
pub mod backend;
pub mod checkpoint;
pub mod conditioning;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod stage_scheduler;
pub mod tensor;
pub mod token_expander;
pub mod trainer;

pub use error::{Result, SefiError};
