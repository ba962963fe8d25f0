//! Dynamic prompt selection for a frozen decoder.
//!
//! A windowed adapter turns feature sequences into tokens, a query built from
//! those tokens and the instruction picks values out of a learnable key-value
//! pool, and the picked values are prepended as a prompt to a small frozen
//! language model. Soft-prompt and LoRA baselines, a synthetic multitask
//! benchmark, a training harness and a pool-usage analyzer complete the set.
//!
//! Everything runs on `f64` tensors and a reverse-mode [`graph::Graph`].

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pool;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use adapter::AdapterConfig;
pub use analysis::{collect_usage, export_report, jaccard_overlap, OverlapReport, UsageMatrix};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use lm::LmConfig;
pub use metrics::Metrics;
pub use model::{Method, Model, ModelConfig, Strategy};
pub use params::{ParamStore, Session};
pub use pool::{PromptPool, SelectionStrategy};
pub use taskgen::{Benchmark, Example, Task, Vocab};
pub use tensor::Tensor;
pub use train::{evaluate, pretrain_backbone, train, Trainer};
