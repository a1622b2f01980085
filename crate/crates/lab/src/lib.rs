//! Std-side companion to `dlab-core`: datasets, transfer-set and
//! checkpoint file formats, the LoRA trainer, hyperparameter search,
//! evaluation, and report assembly. The binary in `main.rs` exposes all
//! of it as subcommands.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod hyperopt;
pub mod manifest;
pub mod report;
pub mod trainer;
pub mod transfer;
