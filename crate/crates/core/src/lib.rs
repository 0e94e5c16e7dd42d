//! Few-shot metric learning on a small reverse-mode autodiff core.
//!
//! Embeddings are pre-trained with a metric loss, adapted online to an
//! episode's support set (fine-tuning, first-order MAML, meta-transfer, or
//! channel-rectifier meta-learning) and evaluated by retrieval on the
//! episode's prediction set.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod scalar;
pub mod tensor;
pub mod network;
pub mod losses;
pub mod rng;
pub mod episodes;
pub mod retrieval;
pub mod adapters;
pub mod synthgen;
pub mod harness;
