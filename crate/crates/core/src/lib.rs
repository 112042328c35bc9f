//! Continual class forgetting for a small transformer classifier.
//!
//! A frozen classifier is edited task by task: each task trains low-rank
//! adapters on the feed-forward weights so that chosen classes stop being
//! recognized while a small replay buffer keeps the rest intact. A group
//! lasso penalty, applied by proximal shrinkage after a warm-up, switches off
//! whole adapter groups so that each task touches as few blocks as possible.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`tensor`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
