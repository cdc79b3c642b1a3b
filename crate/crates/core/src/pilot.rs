//! The four-configuration shallow/deep pilot study.
//!
//! Layers are split into a shallow half and a deep half (the extra layer of
//! an odd split goes to the deep half).
//!
//! | name | shallow   | deep      |
//! |------|-----------|-----------|
//! | A    | 2-bit r8  | 2-bit r8  |
//! | B    | 4-bit r8  | 4-bit r8  |
//! | C    | 4-bit r8  | 2-bit r16 |
//! | D    | 2-bit r16 | 4-bit r8  |
//!
//! On a landscape whose task demand rises with depth the expected ordering is
//! B > D > C > A.

use serde::Serialize;

use crate::error::Result;
use crate::evaluator::{evaluate_config, Evaluator, FULL_PROXY_STEPS};
use crate::space::{LayerConfig, ModelConfig};

pub const EXPECTED_ORDER: [char; 4] = ['B', 'D', 'C', 'A'];

pub fn pilot_config(name: char, layers: usize) -> Option<ModelConfig> {
    let (shallow, deep) = match name {
        'A' => ((2, 8), (2, 8)),
        'B' => ((4, 8), (4, 8)),
        'C' => ((4, 8), (2, 16)),
        'D' => ((2, 16), (4, 8)),
        _ => return None,
    };
    let split = layers / 2;
    Some(ModelConfig::new(
        (0..layers)
            .map(|l| {
                let (b, r) = if l < split { shallow } else { deep };
                LayerConfig::new(b, r)
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotRow {
    pub name: char,
    pub config: ModelConfig,
    pub performance: f64,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotStudy {
    pub rows: Vec<PilotRow>,
}

impl PilotStudy {
    pub fn performance(&self, name: char) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.performance)
    }

    /// Gaps between consecutive entries of [`EXPECTED_ORDER`]; all positive
    /// exactly when the ordering holds.
    pub fn margins(&self) -> Vec<f64> {
        EXPECTED_ORDER
            .windows(2)
            .map(|w| self.performance(w[0]).unwrap_or(f64::NAN) - self.performance(w[1]).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn ordering_holds(&self, min_margin: f64) -> bool {
        self.margins().iter().all(|m| *m > min_margin)
    }
}

/// Evaluates configurations A to D at full proxy steps.
pub fn pilot_study(evaluator: &dyn Evaluator) -> Result<PilotStudy> {
    let layers = evaluator.meta().layers;
    let mut rows = Vec::new();
    for name in ['A', 'B', 'C', 'D'] {
        let config = pilot_config(name, layers).expect("known name");
        let r = evaluate_config(evaluator, &config, FULL_PROXY_STEPS)?;
        rows.push(PilotRow {
            name,
            config,
            performance: r.performance,
            memory_bytes: r.memory_bytes,
        });
    }
    Ok(PilotStudy { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{SyntheticModel, SyntheticParams};

    #[test]
    fn configs_split_at_half() {
        let c = pilot_config('C', 5).unwrap();
        assert_eq!(c.to_string(), "4:8 4:8 2:16 2:16 2:16");
        assert!(pilot_config('E', 4).is_none());
    }

    #[test]
    fn default_landscape_orders_pilot() {
        for layers in [4, 8, 28] {
            let m = SyntheticModel::new(SyntheticParams {
                layers,
                ..Default::default()
            })
            .unwrap();
            let study = pilot_study(&m).unwrap();
            assert!(study.ordering_holds(0.01), "{layers}: {:?}", study.margins());
        }
    }

    #[test]
    fn flat_demand_breaks_the_ordering() {
        let m = SyntheticModel::new(SyntheticParams {
            layers: 8,
            task_demand: vec![0.5; 8],
            ..Default::default()
        })
        .unwrap();
        // with no depth gradient C and D are mirror images
        let s = pilot_study(&m).unwrap();
        assert!(!s.ordering_holds(0.01));
    }
}
