//! Hybrid spatial encoding for 3D volumes.
//!
//! A global 3D ViT and a slice-guided 2D-enhanced 3D encoder are aligned to
//! paired text in two contrastive stages, compressed into a handful of
//! tokens by twin spatial packers, and fed to a small causal decoder for
//! report generation and location questions. A procedural phantom corpus
//! and a metric harness make each stage checkable on a CPU.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kv;
pub mod nn;
pub mod packer;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod synthdata;
pub mod tokenizer;
pub mod train;
pub mod volumetrics;

pub use config::Config;
pub use error::{Error, Result};
