//! Sparse training toolkit: iterative hard thresholding (deterministic,
//! stochastic and with support polishing), the alternating
//! compressed/decompressed (AC/DC) training loop, FLOPs accounting and the
//! diagnostics used to study sparse/dense model pairs.
//!
//! Data-parallel inner loops (mini-batch gradients, independent seeds,
//! Monte-Carlo trials) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and a sequential fallback otherwise. Both
//! paths reduce in a fixed order, so results are bit-identical either way.

pub mod acdc;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flops;
pub mod iht;
pub mod numeric;
pub mod objectives;
pub mod par;
pub mod sparsity;

pub use data::Dataset;
pub use error::{Error, Result};
pub use numeric::{Matrix, ParamSet, PrunableLayout, Segment, SeededRng, Vector};
pub use sparsity::{Keep, Mask, SparsityPattern};
