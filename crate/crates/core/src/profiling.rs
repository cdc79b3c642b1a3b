//! Phase I: per-layer fidelity sensitivity and the task-informed seed.
//!
//! A layer's sensitivity is the mean KL divergence between the full-precision
//! output distribution and the distribution obtained with only that layer
//! quantized to the minimum bit-width. Normalized sensitivities are mapped
//! onto the sorted bit and rank sets by floor-indexing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, Perturbation};
use crate::space::{memory_footprint, LayerConfig, ModelConfig, ModelGeometry, SearchSpace};

const Q_FLOOR: f64 = 1e-12;
const SUPPORT_EPS: f64 = 1e-6;
const SUM_TOLERANCE: f64 = 1e-6;

fn check_distribution(name: &str, v: &[f64]) -> Result<f64> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution(format!("{name} has entry {x}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("{name} sums to {sum}")));
    }
    Ok(sum)
}

/// KL(p || q) in nats. Returns `f64::INFINITY` when `p` puts mass on an entry
/// where `q` is exactly zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let sp = check_distribution("p", p)?;
    let sq = check_distribution("q", q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let (pi, qi) = (pi / sp, qi / sq);
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 && pi > SUPPORT_EPS {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi.max(Q_FLOOR)).ln();
    }
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityProfile {
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    /// All scores were zero and `normalized` fell back to uniform.
    pub degenerate: bool,
}

impl SensitivityProfile {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidParameter("empty sensitivity profile".into()));
        }
        if scores.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "sensitivity scores must be non-negative and finite".into(),
            ));
        }
        let total: f64 = scores.iter().sum();
        let l = scores.len() as f64;
        if !total.is_finite() {
            // infinite scores share the mass equally
            let inf = scores.iter().filter(|s| s.is_infinite()).count() as f64;
            let normalized = scores
                .iter()
                .map(|s| if s.is_infinite() { 1.0 / inf } else { 0.0 })
                .collect();
            return Ok(Self {
                scores,
                normalized,
                degenerate: false,
            });
        }
        if total == 0.0 {
            log::warn!("all sensitivity scores are zero; using uniform weights");
            return Ok(Self {
                normalized: vec![1.0 / l; scores.len()],
                scores,
                degenerate: true,
            });
        }
        Ok(Self {
            normalized: scores.iter().map(|s| s / total).collect(),
            scores,
            degenerate: false,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "score", "normalized"])?;
        for (l, (s, p)) in self.scores.iter().zip(&self.normalized).enumerate() {
            w.write_record([l.to_string(), s.to_string(), p.to_string()])?;
        }
        w.into_inner()
            .map_err(|e| Error::io("profile.csv", e.into_error()))
    }
}

/// Mean KL per layer between the full-precision output and the output with
/// that layer alone at the minimum bit-width.
pub fn sensitivity_profile(
    evaluator: &dyn Evaluator,
    space: &SearchSpace,
    calib_size: usize,
    parallel: usize,
) -> Result<SensitivityProfile> {
    let meta = evaluator.meta();
    if calib_size == 0 || calib_size > meta.calib_size {
        return Err(Error::InvalidParameter(format!(
            "calibration size {calib_size} outside 1..={}",
            meta.calib_size
        )));
    }
    let baselines = (0..calib_size)
        .map(|i| evaluator.distribution(i, None))
        .collect::<Result<Vec<_>>>()?;
    let bit = space.min_bit();
    let layer_score = |layer: usize| -> Result<f64> {
        let mut sum = 0.0;
        for (i, base) in baselines.iter().enumerate() {
            let q = evaluator.distribution(i, Some(Perturbation { layer, bit }))?;
            sum += kl_divergence(base, &q)?;
        }
        Ok(sum / calib_size as f64)
    };

    let scores = if parallel <= 1 {
        (0..meta.layers).map(layer_score).collect::<Result<Vec<_>>>()?
    } else {
        let mut out: Vec<Option<Result<f64>>> = (0..meta.layers).map(|_| None).collect();
        std::thread::scope(|scope| {
            for chunk in out.chunks_mut(meta.layers.div_ceil(parallel)).enumerate() {
                let (c, slots) = chunk;
                let start = c * meta.layers.div_ceil(parallel);
                let layer_score = &layer_score;
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(layer_score(start + k));
                    }
                });
            }
        });
        out.into_iter()
            .map(|s| s.expect("filled"))
            .collect::<Result<Vec<_>>>()?
    };
    SensitivityProfile::from_scores(scores)
}

fn floor_index(p: f64, len: usize) -> usize {
    // tolerance absorbs S/ΣS landing a few ulps below an integer
    let raw = (p * (len - 1) as f64 + 1e-9).floor();
    (raw.max(0.0) as usize).min(len - 1)
}

/// Maps each layer's normalized sensitivity onto the sorted bit and rank sets.
pub fn seed_configuration(profile: &SensitivityProfile, space: &SearchSpace) -> ModelConfig {
    seed_scaled(&profile.normalized, 1.0, space)
}

fn seed_scaled(normalized: &[f64], scale: f64, space: &SearchSpace) -> ModelConfig {
    ModelConfig::new(
        normalized
            .iter()
            .map(|&p| {
                let p = (p * scale).min(1.0);
                LayerConfig::new(
                    space.bits()[floor_index(p, space.bits().len())],
                    space.ranks()[floor_index(p, space.ranks().len())],
                )
            })
            .collect(),
    )
}

/// Fits the seed to `budget`. An over-budget seed is shrunk with
/// [`repair_to_budget`]. An under-budget seed is regrown by scaling every
/// normalized score by the largest common factor whose floor-indexed
/// configuration still fits, so the allocation keeps its sensitivity order.
pub fn fit_seed_to_budget(
    profile: &SensitivityProfile,
    space: &SearchSpace,
    geom: &ModelGeometry,
    budget: u64,
) -> Result<ModelConfig> {
    let p = &profile.normalized;
    let seed = seed_scaled(p, 1.0, space);
    if memory_footprint(&seed, geom)? > budget {
        return repair_to_budget(&seed, p, space, geom, budget);
    }
    // every scale at which some layer's bit or rank index steps up
    let mut steps: Vec<f64> = p
        .iter()
        .filter(|&&x| x > 0.0)
        .flat_map(|&x| {
            let per_axis = |n: usize| (1..n).map(move |k| k as f64 / (x * (n - 1) as f64));
            per_axis(space.bits().len()).chain(per_axis(space.ranks().len()))
        })
        .filter(|&s| s > 1.0)
        .collect();
    steps.sort_by(f64::total_cmp);
    steps.dedup();
    let mut best = seed;
    for s in steps {
        let c = seed_scaled(p, s, space);
        if memory_footprint(&c, geom)? > budget {
            break;
        }
        best = c;
    }
    Ok(best)
}

/// Shrinks `config` until it fits `budget`: repeatedly steps down the bit
/// (then the rank, once the bit is minimal) of the lowest-priority layer not
/// already at its minimum. Ties go to the lower layer index.
pub fn repair_to_budget(
    config: &ModelConfig,
    priorities: &[f64],
    space: &SearchSpace,
    geom: &ModelGeometry,
    budget: u64,
) -> Result<ModelConfig> {
    if priorities.len() != config.len() {
        return Err(Error::LengthMismatch {
            config: config.len(),
            geometry: priorities.len(),
        });
    }
    space.validate(config)?;
    let mut out = config.clone();
    let mut bytes = geom.layer_bytes(&out)?;
    let mut total: u64 = bytes.iter().sum();
    while total > budget {
        let min = LayerConfig::new(space.min_bit(), space.min_rank());
        let victim = (0..out.len())
            .filter(|&l| out.layers()[l] != min)
            .min_by(|&a, &b| priorities[a].total_cmp(&priorities[b]).then(a.cmp(&b)));
        let Some(l) = victim else {
            return Err(Error::InfeasibleBudget {
                budget,
                minimum: total,
            });
        };
        let lc = &mut out.layers_mut()[l];
        if lc.bit != space.min_bit() {
            lc.bit = space.bits()[space.bit_index(lc.bit).unwrap() - 1];
        } else {
            lc.rank = space.ranks()[space.rank_index(lc.rank).unwrap() - 1];
        }
        let new_bytes = geom.layers[l]
            .bytes(*lc, geom.adapter_bytes_per_param)
            .expect("smaller than an existing footprint");
        total = total - bytes[l] + new_bytes;
        bytes[l] = new_bytes;
    }
    debug_assert_eq!(memory_footprint(&out, geom).ok(), Some(total));
    Ok(out)
}
