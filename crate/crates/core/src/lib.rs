//! Group-level communication topology generation for multi-agent systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] dense kernels, gradients, AdamW, checkpoints
//! * [`graph`] groups, group graphs, agent graphs, record codec
//! * [`embedding`] text embeddings, task encoder, candidate matrix
//! * [`model`] the autoregressive generator
//! * [`train`] exploration, curation and the training loop
//! * [`harness`] scheduling, prompting, token accounting, attacks
//! * [`pool`] the bundled group pool and LLM-driven discovery

pub mod embedding;
pub mod graph;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod train;

pub use embedding::{CandidateMatrix, EmbeddingProvider};
pub use graph::{CandidateGroup, GroupGraph, GroupPool, IntraTopology, Trajectory};
pub use model::{ModelConfig, ModelParams};
