//! Resource-efficient text-image retrieval for overhead scenes.
//!
//! Two frozen transformer towers meet in a shared embedding space. The
//! memory-efficient configuration learns through a detached side ladder
//! fed by backbone activations (`focus`), low-rank adapters on the text
//! attention projections, and thin output projections, so backpropagation
//! never enters either backbone. Two heavier configurations (LoRA inside the
//! vision tower, full finetuning) exist as baselines for the profiler.
//!
//! Training combines a symmetric in-batch contrastive loss with a
//! self-weighted ranking term over scene-filtered FIFO queues of stale
//! embeddings. Everything runs on an instrumented scalar tape
//! (`cmer_autodiff`) that reports exactly which activation bytes each
//! configuration keeps for the backward pass.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod focus;
pub mod loss;
pub mod text;
pub mod train;
pub mod vision;

pub use config::{RunConfig, Strategy, FOCUS_HEAD_DIM};
pub use error::{Error, Result};
