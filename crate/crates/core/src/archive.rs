//! Memoized record of every configuration sent to the evaluator.

use std::collections::HashMap;

use serde::Serialize;

use crate::evaluator::{evaluate_batch, Evaluator};
use crate::space::{EvalResult, ModelConfig};

#[derive(Debug, Clone, Serialize)]
pub struct Evaluated {
    pub config: ModelConfig,
    pub result: Result<EvalResult, String>,
}

impl Evaluated {
    pub fn performance(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.performance)
    }
}

/// Every distinct configuration is evaluated at most once per archive.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    entries: Vec<Evaluated>,
    index: HashMap<ModelConfig, usize>,
    proxy_steps_total: u64,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Evaluated] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &Evaluated {
        &self.entries[i]
    }

    pub fn lookup(&self, config: &ModelConfig) -> Option<usize> {
        self.index.get(config).copied()
    }

    pub fn contains(&self, config: &ModelConfig) -> bool {
        self.index.contains_key(config)
    }

    /// Number of evaluator calls made so far.
    pub fn evaluations(&self) -> usize {
        self.entries.len()
    }

    pub fn proxy_steps_total(&self) -> u64 {
        self.proxy_steps_total
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.result.is_err()).count()
    }

    /// Index of the best successful entry; ties go to the earlier entry.
    pub fn best(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(p) = e.performance() {
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((i, p));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn best_performance(&self) -> Option<f64> {
        self.best().and_then(|i| self.entries[i].performance())
    }

    pub fn successful(&self) -> impl Iterator<Item = (usize, &ModelConfig, &EvalResult)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.result.as_ref().ok().map(|r| (i, &e.config, r)))
    }

    /// Evaluates the configurations not seen before and returns the archive
    /// index of every input, in input order.
    pub fn evaluate_many(
        &mut self,
        configs: &[ModelConfig],
        evaluator: &dyn Evaluator,
        proxy_steps: u32,
        parallel: usize,
    ) -> Vec<usize> {
        let mut fresh: Vec<ModelConfig> = Vec::new();
        for c in configs {
            if !self.index.contains_key(c) && !fresh.contains(c) {
                fresh.push(c.clone());
            }
        }
        let results = evaluate_batch(evaluator, &fresh, proxy_steps, parallel);
        for (config, result) in fresh.into_iter().zip(results) {
            if let Err(e) = &result {
                log::warn!("evaluation of {config} failed: {e}");
            }
            self.proxy_steps_total += proxy_steps as u64;
            self.index.insert(config.clone(), self.entries.len());
            self.entries.push(Evaluated {
                config,
                result: result.map_err(|e| e.to_string()),
            });
        }
        configs.iter().map(|c| self.index[c]).collect()
    }

    pub fn evaluate_one(
        &mut self,
        config: &ModelConfig,
        evaluator: &dyn Evaluator,
        proxy_steps: u32,
    ) -> usize {
        self.evaluate_many(std::slice::from_ref(config), evaluator, proxy_steps, 1)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{SyntheticModel, SyntheticParams};
    use crate::space::SearchSpace;

    #[test]
    fn duplicates_are_evaluated_once() {
        let m = SyntheticModel::new(SyntheticParams::default()).unwrap();
        let space = SearchSpace::default();
        let a = space.min_config(8);
        let b = space.max_config(8);
        let mut archive = Archive::new();
        let idx = archive.evaluate_many(&[a.clone(), b.clone(), a.clone()], &m, 10, 1);
        assert_eq!(idx, vec![0, 1, 0]);
        assert_eq!(archive.evaluations(), 2);
        archive.evaluate_one(&b, &m, 10);
        assert_eq!(archive.evaluations(), 2);
        assert_eq!(archive.best(), Some(1));
        assert_eq!(archive.proxy_steps_total(), 20);
    }

    #[test]
    fn failures_are_recorded() {
        let m = SyntheticModel::new(SyntheticParams::default()).unwrap();
        let mut archive = Archive::new();
        archive.evaluate_one(&SearchSpace::default().min_config(2), &m, 10);
        assert_eq!(archive.failures(), 1);
        assert_eq!(archive.best(), None);
    }
}
