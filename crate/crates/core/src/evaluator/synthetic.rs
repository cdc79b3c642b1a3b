//! Desk-scale Fidelity-Plasticity landscape.
//!
//! Each layer has a task demand `T_l` in [0, 1]. A layer is healthy when its
//! supply (adapter rank plus retained fidelity) exceeds its demand
//! (quantization noise plus task demand); the score is a logistic of the gap,
//! exactly 0.5 at the boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Evaluator, EvaluatorMeta, Perturbation};
use crate::error::{Error, Result};
use crate::space::{LayerConfig, ModelConfig, ModelGeometry};

const SHARPNESS: f64 = 4.0;
const PROXY_TAU: f64 = 3.0;
pub const FULL_PROXY_STEPS: u32 = 10;
const DISPLACEMENT_GAIN: f64 = 4.0;

/// Quantization noise `2^-(bit-1)`.
pub fn quant_noise(bit: u32) -> f64 {
    (-(bit as f64 - 1.0)).exp2()
}

/// Logistic score of one layer; `max_rank` normalizes the rank supply.
pub fn layer_score(lc: LayerConfig, task_demand: f64, alpha: f64, beta: f64, max_rank: u32) -> f64 {
    let noise = quant_noise(lc.bit);
    let demand = alpha * noise + beta * task_demand;
    let supply = lc.rank as f64 / max_rank as f64 + (1.0 - noise);
    1.0 / (1.0 + (-SHARPNESS * (supply - demand)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SyntheticParams {
    pub layers: usize,
    /// Per-layer task demand; empty means a linear ramp 0 -> 1.
    pub task_demand: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub noise_scale: f64,
    pub dist_dim: usize,
    pub calib_size: usize,
    pub max_rank: u32,
    /// Width of the square projections used for the synthetic geometry.
    pub dim: u64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            layers: 8,
            task_demand: Vec::new(),
            alpha: 1.0,
            beta: 1.0,
            noise_scale: 0.0,
            dist_dim: 16,
            calib_size: 8,
            max_rank: 16,
            dim: 256,
            seed: 0,
        }
    }
}

pub fn demand_ramp(layers: usize) -> Vec<f64> {
    if layers <= 1 {
        return vec![0.0; layers];
    }
    (0..layers).map(|l| l as f64 / (layers - 1) as f64).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    params: SyntheticParams,
    task_demand: Vec<f64>,
    meta: EvaluatorMeta,
}

impl SyntheticModel {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        if params.layers == 0 {
            return Err(Error::InvalidParameter(
                "synthetic model needs at least one layer".into(),
            ));
        }
        let task_demand = if params.task_demand.is_empty() {
            demand_ramp(params.layers)
        } else {
            params.task_demand.clone()
        };
        if task_demand.len() != params.layers {
            return Err(Error::InvalidParameter(format!(
                "task demand has {} entries for {} layers",
                task_demand.len(),
                params.layers
            )));
        }
        if task_demand.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidParameter("task demand must lie in [0, 1]".into()));
        }
        if !(params.alpha > 0.0 && params.beta > 0.0) {
            return Err(Error::InvalidParameter("alpha and beta must be positive".into()));
        }
        if !(params.noise_scale >= 0.0) || params.dist_dim < 2 || params.calib_size == 0 {
            return Err(Error::InvalidParameter(
                "need noise_scale >= 0, dist_dim >= 2 and calib_size >= 1".into(),
            ));
        }
        if params.max_rank == 0 || params.dim == 0 {
            return Err(Error::InvalidParameter(
                "max_rank and dim must be positive".into(),
            ));
        }
        let meta = EvaluatorMeta {
            layers: params.layers,
            calib_size: params.calib_size,
            geometry: ModelGeometry::uniform_square(params.layers, params.dim, 4),
        };
        Ok(Self {
            params,
            task_demand,
            meta,
        })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn task_demand(&self) -> &[f64] {
        &self.task_demand
    }

    /// Demand-weighted mean layer score, before proxy attenuation and noise.
    pub fn base_score(&self, config: &ModelConfig) -> Result<f64> {
        self.check_len(config)?;
        let p = &self.params;
        let total: f64 = self.task_demand.iter().map(|t| 1.0 + t).sum();
        Ok(config
            .layers()
            .iter()
            .zip(&self.task_demand)
            .map(|(lc, &t)| (1.0 + t) * layer_score(*lc, t, p.alpha, p.beta, p.max_rank))
            .sum::<f64>()
            / total)
    }

    fn check_len(&self, config: &ModelConfig) -> Result<()> {
        if config.len() != self.params.layers {
            return Err(Error::LengthMismatch {
                config: config.len(),
                geometry: self.params.layers,
            });
        }
        Ok(())
    }

    fn pseudo_noise(&self, config: &ModelConfig) -> f64 {
        if self.params.noise_scale == 0.0 {
            return 0.0;
        }
        let mut h = splitmix(self.params.seed ^ 0x5851_f42d_4c95_7f2d);
        for lc in config.layers() {
            h = splitmix(h ^ ((lc.bit as u64) << 32 | lc.rank as u64));
        }
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.params.noise_scale * (2.0 * unit - 1.0)
    }

    fn logits(&self, calib_index: usize) -> (Vec<f64>, Vec<f64>) {
        let seed = splitmix(self.params.seed.wrapping_add(0x9e37_79b9) ^ calib_index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..self.params.dist_dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let mut dir: Vec<f64> = (0..self.params.dist_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|d| *d /= norm);
        (base, dir)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl Evaluator for SyntheticModel {
    fn meta(&self) -> &EvaluatorMeta {
        &self.meta
    }

    fn evaluate(&self, config: &ModelConfig, proxy_steps: u32) -> Result<f64> {
        let base = self.base_score(config)?;
        let full = 1.0 - (-(FULL_PROXY_STEPS as f64) / PROXY_TAU).exp();
        let reached = 1.0 - (-(proxy_steps as f64) / PROXY_TAU).exp();
        let attenuated = (base * reached / full).min(base);
        Ok(attenuated + self.pseudo_noise(config))
    }

    fn distribution(&self, calib_index: usize, perturbation: Option<Perturbation>) -> Result<Vec<f64>> {
        if calib_index >= self.params.calib_size {
            return Err(Error::InvalidParameter(format!(
                "calibration index {calib_index} out of range (size {})",
                self.params.calib_size
            )));
        }
        let (mut logits, dir) = self.logits(calib_index);
        if let Some(p) = perturbation {
            let t = *self
                .task_demand
                .get(p.layer)
                .ok_or_else(|| Error::InvalidParameter(format!("layer {} out of range", p.layer)))?;
            let magnitude = DISPLACEMENT_GAIN * t * quant_noise(p.bit);
            for (z, d) in logits.iter_mut().zip(&dir) {
                *z += magnitude * d;
            }
        }
        Ok(softmax(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiling::kl_divergence;
    use crate::space::SearchSpace;

    fn model(params: SyntheticParams) -> SyntheticModel {
        SyntheticModel::new(params).unwrap()
    }

    #[test]
    fn quant_noise_values() {
        assert_eq!(quant_noise(2), 0.5);
        assert_eq!(quant_noise(8), 2f64.powi(-7));
        assert!(quant_noise(2) > quant_noise(4) && quant_noise(4) > quant_noise(8));
    }

    #[test]
    fn layer_score_midpoint_and_top() {
        // bit 2 -> noise 0.5, demand 0.5 + T; supply r/16 + 0.5; equal when r/16 = T
        let s = layer_score(LayerConfig::new(2, 8), 0.5, 1.0, 1.0, 16);
        assert!((s - 0.5).abs() < 1e-15);
        assert!(layer_score(LayerConfig::new(8, 16), 0.0, 1.0, 1.0, 16) > 0.9);
    }

    #[test]
    fn layer_score_monotone_in_each_axis() {
        let space = SearchSpace::default();
        for t in [0.0, 0.3, 1.0] {
            for &r in space.ranks() {
                let s: Vec<f64> = space
                    .bits()
                    .iter()
                    .map(|&b| layer_score(LayerConfig::new(b, r), t, 1.0, 1.0, 16))
                    .collect();
                assert!(s.windows(2).all(|w| w[0] <= w[1]));
            }
            for &b in space.bits() {
                let s: Vec<f64> = space
                    .ranks()
                    .iter()
                    .map(|&r| layer_score(LayerConfig::new(b, r), t, 1.0, 1.0, 16))
                    .collect();
                assert!(s.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn proxy_attenuation() {
        let m = model(SyntheticParams::default());
        let c = SearchSpace::default().max_config(8);
        assert_eq!(m.evaluate(&c, 0).unwrap(), 0.0);
        let full = m.evaluate(&c, FULL_PROXY_STEPS).unwrap();
        assert!((full - m.base_score(&c).unwrap()).abs() < 1e-12);
        assert_eq!(m.evaluate(&c, 50).unwrap(), full);
        assert!(m.evaluate(&c, 3).unwrap() < full);
    }

    #[test]
    fn max_config_is_upper_envelope() {
        let m = model(SyntheticParams::default());
        let space = SearchSpace::default();
        let top = m.evaluate(&space.max_config(8), FULL_PROXY_STEPS).unwrap();
        for &b in space.bits() {
            for &r in space.ranks() {
                let c = space.uniform(8, LayerConfig::new(b, r));
                assert!(m.evaluate(&c, FULL_PROXY_STEPS).unwrap() <= top);
            }
        }
    }

    #[test]
    fn pseudo_noise_is_bounded_and_repeatable() {
        let m = model(SyntheticParams {
            noise_scale: 0.02,
            seed: 7,
            ..Default::default()
        });
        let clean = model(SyntheticParams::default());
        let c = SearchSpace::default().uniform(8, LayerConfig::new(4, 8));
        let a = m.evaluate(&c, 10).unwrap();
        assert_eq!(a, m.evaluate(&c, 10).unwrap());
        assert!((a - clean.evaluate(&c, 10).unwrap()).abs() <= 0.02);
    }

    #[test]
    fn unperturbed_distribution_is_baseline() {
        let m = model(SyntheticParams::default());
        let p = m.distribution(0, None).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &m.distribution(0, None).unwrap()).unwrap(), 0.0);
        // layer 0 has zero demand under the ramp
        let q = m
            .distribution(0, Some(Perturbation { layer: 0, bit: 2 }))
            .unwrap();
        assert_eq!(kl_divergence(&p, &q).unwrap(), 0.0);
        assert!(m.distribution(8, None).is_err());
    }

    #[test]
    fn higher_demand_diverges_more() {
        let m = model(SyntheticParams {
            layers: 2,
            task_demand: vec![0.2, 0.9],
            ..Default::default()
        });
        let mean_kl = |layer| {
            (0..m.meta().calib_size)
                .map(|i| {
                    let p = m.distribution(i, None).unwrap();
                    let q = m.distribution(i, Some(Perturbation { layer, bit: 2 })).unwrap();
                    kl_divergence(&p, &q).unwrap()
                })
                .sum::<f64>()
        };
        assert!(mean_kl(1) > mean_kl(0));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SyntheticModel::new(SyntheticParams {
            layers: 0,
            ..Default::default()
        })
        .is_err());
        assert!(SyntheticModel::new(SyntheticParams {
            layers: 2,
            task_demand: vec![0.5, 1.5],
            ..Default::default()
        })
        .is_err());
    }
}
