//! Unified motion-language modeling at desk scale.
//!
//! Motion sequences are quantized into discrete tokens by a VQ-VAE, fused
//! with a byte-level text vocabulary through an adapter and dual output
//! heads on a small encoder-decoder sequence model, instruction-tuned on
//! eleven motion/planning tasks, and driven through a closed loop
//! (plan -> decompose -> generate -> in-between -> understand -> summarize)
//! with cycle-consistency and judge-based coherence evaluation.

pub mod annotate;
pub mod chat;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod lm;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;
