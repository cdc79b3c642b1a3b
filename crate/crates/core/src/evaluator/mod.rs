//! The boundary between the search and the model being tuned.
//!
//! An [`Evaluator`] scores configurations (higher is better) and answers
//! calibration-distribution queries used for sensitivity profiling. Two
//! implementations ship here: the in-process [`SyntheticModel`] and the
//! [`ExternalEvaluator`] that drives child processes over newline-delimited
//! JSON.

mod host;
mod synthetic;
pub mod wire;

use serde::{Deserialize, Serialize};

pub use host::{ExternalEvaluator, HostOptions};
pub use synthetic::{layer_score, quant_noise, SyntheticModel, SyntheticParams, FULL_PROXY_STEPS};

use crate::error::{Error, Result};
use crate::space::{memory_footprint, EvalResult, ModelConfig, ModelGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorMeta {
    pub layers: usize,
    pub calib_size: usize,
    pub geometry: ModelGeometry,
}

/// Quantize `layer` alone to `bit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    pub layer: usize,
    pub bit: u32,
}

pub trait Evaluator: Send + Sync {
    fn meta(&self) -> &EvaluatorMeta;

    /// Higher-is-better score of `config` after `proxy_steps` of adapter
    /// tuning. Must be deterministic for a fixed evaluator seed.
    fn evaluate(&self, config: &ModelConfig, proxy_steps: u32) -> Result<f64>;

    /// Output probability vector for calibration input `calib_index`, with
    /// optionally one layer quantized.
    fn distribution(&self, calib_index: usize, perturbation: Option<Perturbation>) -> Result<Vec<f64>>;
}

/// Evaluates `config` and prices it against the evaluator's geometry.
pub fn evaluate_config(
    evaluator: &dyn Evaluator,
    config: &ModelConfig,
    proxy_steps: u32,
) -> Result<EvalResult> {
    let memory = memory_footprint(config, &evaluator.meta().geometry)?;
    let performance = evaluator.evaluate(config, proxy_steps)?;
    if !performance.is_finite() {
        return Err(Error::Evaluator(format!(
            "non-finite performance {performance} for {config}"
        )));
    }
    Ok(EvalResult::new(performance, memory))
}

/// Evaluates `configs` with up to `parallel` concurrent requests. Results come
/// back in input order regardless of completion order.
pub fn evaluate_batch(
    evaluator: &dyn Evaluator,
    configs: &[ModelConfig],
    proxy_steps: u32,
    parallel: usize,
) -> Vec<Result<EvalResult>> {
    if parallel <= 1 || configs.len() <= 1 {
        return configs
            .iter()
            .map(|c| evaluate_config(evaluator, c, proxy_steps))
            .collect();
    }
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EvalResult>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = evaluate_config(evaluator, &configs[i], proxy_steps);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}
