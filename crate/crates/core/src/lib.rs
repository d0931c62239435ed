//! Retrieval-augmented neurocognitive screening.
//!
//! A patient case is encoded into a summary vector, similar labelled cases
//! are fetched from an exact cosine index and reranked, their hidden
//! sequences are fused into the target's representation by single-head
//! cross-attention, and a linear multi-label head scores the five
//! Alzheimer's subtypes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod casemodel;
pub mod config;
pub mod diagnose;
pub mod encoder;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod retrieval;
pub mod screen;
pub mod service;
