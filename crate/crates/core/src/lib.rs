//! Cumulative visual-token pruning inside a frozen toy transformer decoder,
//! with delayed FiLM repair adapters and a moment-matching alignment loss.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`rng`], [`gradcheck`]: numerics and differentiation
//! - [`layout`]: sequence segmentation and the answer-region gate
//! - [`backbone`]: the frozen decoder with teacher / masked / gathered passes
//! - [`pruner`]: residual cross-attention scoring and cumulative masks
//! - [`adapter`]: pruning-context cache and FiLM repair
//! - [`rcp`]: the plug-in model, variants and the student forward pass
//! - [`params`], [`optim`]: named parameter stores and Adam
//! - [`objectives`]: repair, sparsity and total losses plus schedules
//! - [`harness`]: synthetic task, pre-training, plug-in training, evaluation
//! - [`metrics`]: FLOPs / KV-cache accounting, drift, retention reports
//! - [`config`], [`checkpoint`]: run configuration and binary parameter files
//! - [`report`]: post-training summary, drift, retention and efficiency tables

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layout;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pruner;
pub mod rcp;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{RegionGate, SequenceLayout};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
