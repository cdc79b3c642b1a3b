//! Joint per-layer quantization bit-width and adapter-rank search under a hard
//! memory budget.
//!
//! The search runs in three phases:
//!
//! 1. [`profiling`]: per-layer KL sensitivity to minimum-bit quantization and a
//!    deterministic seed configuration derived from it.
//! 2. [`evolve`]: NSGA-II style Pareto-ranking genetic search over
//!    (performance, memory) with atomic (bit, rank) genes.
//! 3. [`bayes`]: Gaussian-process refinement of the Pareto front with a
//!    Matérn-5/2 kernel and Expected Improvement.
//!
//! Configurations are scored by an [`evaluator::Evaluator`]; a synthetic
//! landscape ships in-process and external evaluators are driven over
//! newline-delimited JSON.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod bayes;
pub mod error;
pub mod evaluator;
pub mod evolve;
pub mod pilot;
pub mod pipeline;
pub mod profiling;
pub mod report;
pub mod space;

pub use error::{Error, Result};
pub use space::{EvalResult, LayerConfig, LayerGeometry, ModelConfig, ModelGeometry, SearchSpace};
