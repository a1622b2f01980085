//! Numerical core for a desk-scale knowledge-distillation laboratory:
//! dense-tensor reverse-mode autodiff, a small decoder-only transformer
//! with LoRA adapters and attention capture, the combined distillation
//! loss, attention interpretability metrics, and Gaussian-process
//! Bayesian optimization.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the
//! CLI live in the companion `dlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod bayesopt;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use tensor::{Tensor, TensorError};
