//! Progressive cell search driving a first-order meta-learner.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`layers`], [`optim`], [`gradcheck`]: dense `f64`
//!   tensors with tape-based reverse-mode gradients, the layer set used by
//!   compiled networks, SGD/Adam and a finite-difference checker.
//! * [`cell`], [`network`]: the block/cell genotype, progressive enumeration,
//!   cell depth, and compilation of a cell into a full CNN.
//! * [`data`]: synthetic glyph datasets, the FSDS binary format and episodic
//!   n-way k-shot sampling.
//! * [`meta`]: Reptile inner adaptation, outer updates, training and episodic
//!   evaluation with optional transduction.
//! * [`surrogate`]: the LSTM accuracy predictor over tokenized cells.
//! * [`search`], [`report`], [`config`]: the beam search loop, checkpoints,
//!   final training and report files.

pub mod cell;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod meta;
pub mod network;
pub mod optim;
pub mod report;
pub mod rng;
pub mod search;
pub mod stats;
pub mod surrogate;
pub mod tape;
pub mod tensor;

pub use cell::{cell_depth, depth_distribution, enumerate_expansions, BlockOp, BlockSpec, Branch, CellSpec, InputRef};
pub use error::{Error, Result};
pub use network::{compile_network, ModelState, Network, NetworkSpec};
pub use tensor::Tensor;
