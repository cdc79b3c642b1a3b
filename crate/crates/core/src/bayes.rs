//! Phase III: Gaussian-process refinement around the Phase II front.
//!
//! Configurations are embedded as `[log2(bit)/log2(max bit), rank/max rank]`
//! per layer. The surrogate is a zero-mean GP on standardized performance with
//! a Matérn-5/2 ARD kernel whose lengthscales come from the median heuristic.
//! Each refinement round scores a pool of feasible neighbors by Expected
//! Improvement and evaluates the argmax.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::evolve::SearchContext;
use crate::space::{memory_footprint, LayerConfig, ModelConfig, SearchSpace};

const SQRT5: f64 = 2.236_067_977_499_79;
const LENGTHSCALE_FLOOR: f64 = 1e-3;
const DEFAULT_JITTER: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;

/// Continuous embedding of a configuration, two coordinates per layer.
pub fn encode(config: &ModelConfig, space: &SearchSpace) -> Vec<f64> {
    let max_bit = (space.max_bit() as f64).log2();
    let max_rank = space.max_rank() as f64;
    config
        .layers()
        .iter()
        .flat_map(|lc| {
            let bit = if max_bit > 0.0 {
                (lc.bit as f64).log2() / max_bit
            } else {
                1.0
            };
            [bit, lc.rank as f64 / max_rank]
        })
        .collect()
}

fn scaled_distance(x: &[f64], z: &[f64], ls: &[f64]) -> f64 {
    x.iter()
        .zip(z)
        .zip(ls)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn matern52_unchecked(x: &[f64], z: &[f64], ls: &[f64], sv: f64) -> f64 {
    let d = scaled_distance(x, z, ls);
    sv * (1.0 + SQRT5 * d + 5.0 * d * d / 3.0) * (-SQRT5 * d).exp()
}

/// Matérn-5/2 covariance with per-dimension lengthscales.
pub fn matern52(x: &[f64], z: &[f64], lengthscales: &[f64], signal_variance: f64) -> Result<f64> {
    if x.len() != z.len() || x.len() != lengthscales.len() {
        return Err(Error::InvalidParameter(format!(
            "dimension mismatch: {} / {} / {}",
            x.len(),
            z.len(),
            lengthscales.len()
        )));
    }
    if !(signal_variance > 0.0) || lengthscales.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidParameter(
            "kernel hyperparameters must be positive".into(),
        ));
    }
    Ok(matern52_unchecked(x, z, lengthscales, signal_variance))
}

/// Gram matrix of `points` under the Matérn-5/2 kernel.
pub fn gram_matrix(points: &[Vec<f64>], lengthscales: &[f64], signal_variance: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        matern52_unchecked(&points[i], &points[j], lengthscales, signal_variance)
    })
}

/// Per-dimension median of the non-zero pairwise gaps, floored at 1e-3.
/// Dimensions with no non-zero gap get lengthscale 1.
pub fn median_lengthscales(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    (0..dim)
        .map(|k| {
            let mut gaps: Vec<f64> = Vec::new();
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    let g = (points[i][k] - points[j][k]).abs();
                    if g > 0.0 {
                        gaps.push(g);
                    }
                }
            }
            if gaps.is_empty() {
                return 1.0;
            }
            gaps.sort_by(f64::total_cmp);
            let m = gaps.len();
            let median = if m % 2 == 1 {
                gaps[m / 2]
            } else {
                0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
            };
            median.max(LENGTHSCALE_FLOOR)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct GpOptions {
    /// Fixed lengthscales instead of the median heuristic.
    pub lengthscales: Option<Vec<f64>>,
    /// Diagonal noise; defaults to 1e-6 jitter.
    pub noise_variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// All training inputs were identical.
    pub degenerate: bool,
}

pub fn gp_fit(points: &[(Vec<f64>, f64)]) -> Result<GpModel> {
    gp_fit_with(points, &GpOptions::default())
}

pub fn gp_fit_with(points: &[(Vec<f64>, f64)], options: &GpOptions) -> Result<GpModel> {
    let Some((first, _)) = points.first() else {
        return Err(Error::InvalidParameter("GP fit needs at least one point".into()));
    };
    let dim = first.len();
    if points.iter().any(|(x, _)| x.len() != dim) {
        return Err(Error::InvalidParameter(
            "training inputs differ in dimension".into(),
        ));
    }
    if points
        .iter()
        .any(|(x, y)| !y.is_finite() || x.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidParameter("training data must be finite".into()));
    }
    let train_x: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
    let train_y: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
    let n = train_y.len() as f64;
    let y_mean = train_y.iter().sum::<f64>() / n;
    let var = train_y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
    let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

    let degenerate = train_x.iter().all(|x| x == first);
    if degenerate && train_x.len() > 1 {
        log::warn!("GP training inputs are all identical");
    }
    let lengthscales = match &options.lengthscales {
        Some(ls) => {
            if ls.len() != dim || ls.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::InvalidParameter("bad fixed lengthscales".into()));
            }
            ls.clone()
        }
        None => median_lengthscales(&train_x),
    };
    let signal_variance = 1.0;
    let base = gram_matrix(&train_x, &lengthscales, signal_variance);
    let mut noise = options.noise_variance.unwrap_or(DEFAULT_JITTER).max(0.0);
    let factor = loop {
        let mut k = base.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        match Cholesky::new(k) {
            Some(f) => break f,
            None if noise >= MAX_JITTER => return Err(Error::Factorization { jitter: noise }),
            None => {
                noise = (noise * 10.0).clamp(1e-10, MAX_JITTER);
                log::debug!("escalating GP jitter to {noise:e}");
            }
        }
    };
    let y = DVector::from_iterator(train_y.len(), train_y.iter().map(|y| (y - y_mean) / y_std));
    let alpha = factor.solve(&y);
    Ok(GpModel {
        train_x,
        train_y,
        y_mean,
        y_std,
        lengthscales,
        signal_variance,
        noise_variance: noise,
        factor,
        alpha,
        degenerate,
    })
}

impl GpModel {
    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.train_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_y.is_empty()
    }

    /// Posterior (mean, variance) in standardized units.
    pub fn posterior_standardized(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.lengthscales.len() {
            return Err(Error::InvalidParameter(format!(
                "query has dimension {}, model {}",
                x.len(),
                self.lengthscales.len()
            )));
        }
        let k_star = DVector::from_iterator(
            self.train_x.len(),
            self.train_x
                .iter()
                .map(|t| matern52_unchecked(t, x, &self.lengthscales, self.signal_variance)),
        );
        let mean = k_star.dot(&self.alpha);
        let v = self
            .factor
            .l()
            .solve_lower_triangular(&k_star)
            .expect("cholesky factor is non-singular");
        let var = (self.signal_variance - v.dot(&v)).max(0.0);
        Ok((mean, var))
    }
}

/// Posterior mean and variance at `x` in the original units.
pub fn gp_posterior(model: &GpModel, x: &[f64]) -> Result<(f64, f64)> {
    let (m, v) = model.posterior_standardized(x)?;
    Ok((m * model.y_std + model.y_mean, v * model.y_std * model.y_std))
}

/// E[max(0, f - y_best)] for f ~ N(mean, std²).
pub fn expected_improvement(mean: f64, std: f64, y_best: f64) -> f64 {
    let delta = mean - y_best;
    if !(std > 0.0) {
        return delta.max(0.0);
    }
    let z = delta / std;
    let normal = Normal::standard();
    (delta * normal.cdf(z) + std * normal.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct RefineParams {
    pub iters_per_config: usize,
    pub proxy_steps: u32,
    /// Candidate pools larger than this are uniformly subsampled.
    pub pool_limit: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            iters_per_config: 5,
            proxy_steps: 10,
            pool_limit: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub member: usize,
    pub round: usize,
    pub candidate: Option<ModelConfig>,
    pub expected_improvement: Option<f64>,
    pub performance: Option<f64>,
    pub best_performance: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RefineOutcome {
    pub rounds: Vec<RoundRecord>,
    pub warnings: Vec<String>,
    /// Archive index of the best successful evaluation.
    pub best: Option<usize>,
}

fn neighbors(center: &ModelConfig, space: &SearchSpace, out: &mut BTreeSet<ModelConfig>) {
    for l in 0..center.len() {
        let lc = center.layers()[l];
        let bi = space.bit_index(lc.bit).expect("valid config") as i64;
        let ri = space.rank_index(lc.rank).expect("valid config") as i64;
        for db in -1..=1i64 {
            for dr in -1..=1i64 {
                if db == 0 && dr == 0 {
                    continue;
                }
                let (b, r) = (bi + db, ri + dr);
                if b < 0 || r < 0 || b >= space.bits().len() as i64 || r >= space.ranks().len() as i64 {
                    continue;
                }
                let mut c = center.clone();
                c.layers_mut()[l] = LayerConfig::new(space.bits()[b as usize], space.ranks()[r as usize]);
                out.insert(c);
            }
        }
    }
}

/// Uniform draws from the product neighborhood where every layer independently
/// stays or moves one step on either axis.
fn joint_neighbors<R: Rng + ?Sized>(
    center: &ModelConfig,
    space: &SearchSpace,
    draws: usize,
    rng: &mut R,
    out: &mut BTreeSet<ModelConfig>,
) {
    let options: Vec<Vec<LayerConfig>> = center
        .layers()
        .iter()
        .map(|lc| {
            let bi = space.bit_index(lc.bit).expect("valid config");
            let ri = space.rank_index(lc.rank).expect("valid config");
            let bits = &space.bits()[bi.saturating_sub(1)..(bi + 2).min(space.bits().len())];
            let ranks = &space.ranks()[ri.saturating_sub(1)..(ri + 2).min(space.ranks().len())];
            bits.iter()
                .flat_map(|&b| ranks.iter().map(move |&r| LayerConfig::new(b, r)))
                .collect()
        })
        .collect();
    for _ in 0..draws {
        let layers = options.iter().map(|o| o[rng.random_range(0..o.len())]).collect();
        out.insert(ModelConfig::new(layers));
    }
}

fn recombinations(center: &ModelConfig, others: &[ModelConfig], out: &mut BTreeSet<ModelConfig>) {
    for other in others {
        for l in 0..center.len() {
            if other.layers()[l] != center.layers()[l] {
                let mut c = center.clone();
                c.layers_mut()[l] = other.layers()[l];
                out.insert(c);
            }
        }
    }
}

/// Feasible, not yet evaluated candidates around `center`, in deterministic
/// order and bounded by `limit`.
pub fn candidate_pool<R: Rng + ?Sized>(
    center: &ModelConfig,
    front: &[ModelConfig],
    ctx: &SearchContext<'_>,
    archive: &Archive,
    limit: usize,
    rng: &mut R,
) -> Vec<ModelConfig> {
    let mut set = BTreeSet::new();
    neighbors(center, ctx.space, &mut set);
    recombinations(center, front, &mut set);
    joint_neighbors(center, ctx.space, limit, rng, &mut set);
    let geom = &ctx.evaluator.meta().geometry;
    let pool: Vec<ModelConfig> = set
        .into_iter()
        .filter(|c| !archive.contains(c))
        .filter(|c| memory_footprint(c, geom).is_ok_and(|m| m <= ctx.budget))
        .collect();
    if pool.len() <= limit {
        return pool;
    }
    let mut keep = sample(rng, pool.len(), limit).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pool[i].clone()).collect()
}

fn fit_archive(archive: &Archive, space: &SearchSpace) -> Result<GpModel> {
    let points: Vec<(Vec<f64>, f64)> = archive
        .successful()
        .map(|(_, c, r)| (encode(c, space), r.performance))
        .collect();
    gp_fit(&points)
}

/// Refines each front member for `iters_per_config` rounds. Every round
/// re-centers on the best configuration found so far for that member.
pub fn refine<R: Rng + ?Sized>(
    front: &[ModelConfig],
    params: &RefineParams,
    ctx: &SearchContext<'_>,
    archive: &mut Archive,
    rng: &mut R,
) -> Result<RefineOutcome> {
    let mut outcome = RefineOutcome::default();
    for (member, start) in front.iter().enumerate() {
        let mut center = start.clone();
        let mut center_perf = archive
            .lookup(&center)
            .and_then(|i| archive.get(i).performance())
            .unwrap_or(f64::NEG_INFINITY);
        for round in 0..params.iters_per_config {
            let pool = candidate_pool(&center, front, ctx, archive, params.pool_limit, rng);
            let y_best = archive.best_performance();
            let (Some(y_best), false) = (y_best, pool.is_empty()) else {
                let msg = format!("member {member} round {round}: no feasible candidates, skipped");
                log::warn!("{msg}");
                outcome.warnings.push(msg);
                outcome.rounds.push(RoundRecord {
                    member,
                    round,
                    candidate: None,
                    expected_improvement: None,
                    performance: None,
                    best_performance: archive.best_performance().unwrap_or(f64::NEG_INFINITY),
                    evaluations: archive.evaluations(),
                });
                continue;
            };
            let gp = fit_archive(archive, ctx.space)?;
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in pool.iter().enumerate() {
                let (mean, var) = gp_posterior(&gp, &encode(c, ctx.space))?;
                let ei = expected_improvement(mean, var.sqrt(), y_best);
                if best.is_none_or(|(_, b)| ei > b) {
                    best = Some((i, ei));
                }
            }
            let (pick, ei) = best.expect("pool is non-empty");
            let candidate = pool[pick].clone();
            let idx = archive.evaluate_one(&candidate, ctx.evaluator, params.proxy_steps);
            let perf = archive.get(idx).performance();
            if let Some(p) = perf {
                if p > center_perf {
                    center = candidate.clone();
                    center_perf = p;
                }
            }
            let rec = RoundRecord {
                member,
                round,
                candidate: Some(candidate),
                expected_improvement: Some(ei),
                performance: perf,
                best_performance: archive.best_performance().unwrap_or(f64::NEG_INFINITY),
                evaluations: archive.evaluations(),
            };
            log::info!(
                "refine member {member} round {round}: EI {ei:.3e}, performance {:?}, best {:.6}",
                perf,
                rec.best_performance
            );
            outcome.rounds.push(rec);
        }
    }
    outcome.best = archive.best();
    Ok(outcome)
}
