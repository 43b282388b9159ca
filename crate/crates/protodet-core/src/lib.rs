//! Few-shot object detection by prototype propagation over a semantic
//! category graph.
//!
//! This crate is the `no_std` (with `alloc`) numerical core: a small
//! reverse-mode tensor tape, meta-graph construction from word embeddings,
//! two-layer graph-convolutional prototype refinement, prototype-reweighted
//! predictor heads, episode sampling with a synthetic feature-level task,
//! VOC-style mAP evaluation and the two-phase training pipeline.
//! File formats, configuration and the command-line harness live in the
//! `protodet` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bbox;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod proto;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use optim::SgdState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
