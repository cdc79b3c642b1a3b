//! End-to-end orchestration of profiling, evolutionary search and Bayesian
//! refinement.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::bayes::{refine, RefineParams, RoundRecord};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_batch, Evaluator, EvaluatorMeta, Perturbation, SyntheticParams};
use crate::evolve::{evolve, EvolveParams, GenerationRecord, MutationOperator, SearchContext};
use crate::profiling::{fit_seed_to_budget, repair_to_budget, sensitivity_profile, SensitivityProfile};
use crate::space::{
    average_bit, average_rank, dominates, mean_rank, memory_footprint, LayerConfig, ModelConfig,
    ModelGeometry, SearchSpace, DEFAULT_BITS, DEFAULT_RANKS,
};

/// Bit-vs-sensitivity correlation reported for real models, kept alongside
/// the measured value for comparison.
pub const REFERENCE_PEARSON_R: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Appendix,
    MainText,
}

impl Preset {
    pub fn params(self) -> EvolveParams {
        match self {
            Preset::Appendix => EvolveParams::appendix(),
            Preset::MainText => EvolveParams::main_text(),
        }
    }
}

/// Everything needed to reproduce a run. Field names mirror the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunSpec {
    pub space_bits: Vec<u32>,
    pub space_ranks: Vec<u32>,
    pub budget_bytes: Option<u64>,
    pub budget_avg_bits: Option<f64>,
    /// Geometry document overriding the evaluator's own.
    pub geometry: Option<PathBuf>,
    pub preset: Preset,
    pub pop: Option<usize>,
    pub gens: Option<usize>,
    pub offspring: Option<usize>,
    pub crossover_prob: Option<f64>,
    pub mutation_prob: Option<f64>,
    pub mutation: Option<MutationOperator>,
    pub tournament_size: Option<usize>,
    pub proxy_steps: u32,
    pub bo_iters: usize,
    pub calib_size: Option<usize>,
    pub seed: u64,
    pub evaluator_cmd: Option<String>,
    pub synthetic: SyntheticParams,
    pub skip_phase1: bool,
    pub skip_phase2: bool,
    pub skip_phase3: bool,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub parallel: usize,
    /// Evaluate every uniform (bit, rank) configuration as a baseline.
    pub uniform_baseline: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            space_bits: DEFAULT_BITS.to_vec(),
            space_ranks: DEFAULT_RANKS.to_vec(),
            budget_bytes: None,
            budget_avg_bits: None,
            geometry: None,
            preset: Preset::Appendix,
            pop: None,
            gens: None,
            offspring: None,
            crossover_prob: None,
            mutation_prob: None,
            mutation: None,
            tournament_size: None,
            proxy_steps: 10,
            bo_iters: 5,
            calib_size: None,
            seed: 0,
            evaluator_cmd: None,
            synthetic: SyntheticParams::default(),
            skip_phase1: false,
            skip_phase2: false,
            skip_phase3: false,
            out: None,
            deterministic: false,
            parallel: 1,
            uniform_baseline: true,
        }
    }
}

pub const DEFAULT_BUDGET_AVG_BITS: f64 = 4.0;

impl RunSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: RunSpec = serde_json::from_str(s)?;
        spec.space()?;
        spec.evolve_params().validate()?;
        Ok(spec)
    }

    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::new(self.space_bits.clone(), self.space_ranks.clone())
    }

    pub fn evolve_params(&self) -> EvolveParams {
        let mut p = self.preset.params();
        if let Some(v) = self.pop {
            p.population_size = v;
        }
        if let Some(v) = self.gens {
            p.generations = v;
        }
        if self.offspring.is_some() {
            p.offspring = self.offspring;
        }
        if let Some(v) = self.crossover_prob {
            p.crossover_prob = v;
        }
        if let Some(v) = self.mutation_prob {
            p.mutation_prob_per_layer = v;
        }
        if let Some(v) = self.mutation {
            p.mutation = v;
        }
        if let Some(v) = self.tournament_size {
            p.tournament_size = v;
        }
        p.proxy_steps = self.proxy_steps;
        p.rng_seed = self.seed;
        p.parallel = self.effective_parallel();
        p
    }

    pub fn effective_parallel(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.parallel.max(1)
        }
    }

    /// Budget in bytes. An average-bit target prices frozen weights at that
    /// width and adapters at the space's median rank.
    pub fn budget(&self, space: &SearchSpace, geom: &ModelGeometry) -> Result<u64> {
        match (self.budget_bytes, self.budget_avg_bits) {
            (Some(_), Some(_)) => Err(Error::InvalidParameter(
                "give either budget-bytes or budget-avg-bits, not both".into(),
            )),
            (Some(b), None) => Ok(b),
            (None, avg) => budget_from_avg_bits(avg.unwrap_or(DEFAULT_BUDGET_AVG_BITS), space, geom),
        }
    }
}

pub fn budget_from_avg_bits(avg_bits: f64, space: &SearchSpace, geom: &ModelGeometry) -> Result<u64> {
    if !(avg_bits > 0.0) || !avg_bits.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "average bits {avg_bits} must be positive"
        )));
    }
    let rank = space.median_layer().rank as u64;
    let mut total = 0u64;
    for g in &geom.layers {
        let frozen = (g.frozen_params as f64 * avg_bits / 8.0).ceil() as u64;
        total += frozen + g.adapter_width() * rank * geom.adapter_bytes_per_param + g.fixed_overhead_bytes;
    }
    Ok(total)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length series of at least 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

struct GeometryOverride<'a> {
    inner: &'a dyn Evaluator,
    meta: EvaluatorMeta,
}

impl Evaluator for GeometryOverride<'_> {
    fn meta(&self) -> &EvaluatorMeta {
        &self.meta
    }

    fn evaluate(&self, config: &ModelConfig, proxy_steps: u32) -> Result<f64> {
        self.inner.evaluate(config, proxy_steps)
    }

    fn distribution(&self, calib_index: usize, p: Option<Perturbation>) -> Result<Vec<f64>> {
        self.inner.distribution(calib_index, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub phase: &'static str,
    pub step: usize,
    pub best_perf: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredConfig {
    pub config: ModelConfig,
    pub performance: f64,
    pub memory_bytes: u64,
    pub average_bit: f64,
    /// Parameter-weighted mean rank.
    pub average_rank: f64,
    /// Unweighted mean rank.
    pub mean_rank: f64,
}

impl ScoredConfig {
    fn new(config: &ModelConfig, performance: f64, geom: &ModelGeometry) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            performance,
            memory_bytes: memory_footprint(config, geom)?,
            average_bit: average_bit(config, geom)?,
            average_rank: average_rank(config, geom)?,
            mean_rank: mean_rank(config),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformBaseline {
    pub best: Option<ScoredConfig>,
    pub feasible: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseFlags {
    pub profile: bool,
    pub evolve: bool,
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub budget_bytes: u64,
    pub layers: usize,
    pub phases: PhaseFlags,
    pub profile: Option<SensitivityProfile>,
    pub seed: Option<ScoredConfig>,
    pub generations: Vec<GenerationRecord>,
    pub refine_rounds: Vec<RoundRecord>,
    pub trace: Vec<TraceRow>,
    /// Non-dominated set over every evaluated configuration, by memory.
    pub pareto: Vec<ScoredConfig>,
    pub best: Option<ScoredConfig>,
    pub pearson_bits_vs_sensitivity: Option<f64>,
    pub uniform_baseline: Option<UniformBaseline>,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    pub proxy_steps_total: u64,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl RunReport {
    /// False when no configuration was evaluated successfully or a phase
    /// failed.
    pub fn succeeded(&self) -> bool {
        self.best.is_some() && self.errors.is_empty()
    }
}

fn pareto_set(archive: &Archive, geom: &ModelGeometry) -> Result<Vec<ScoredConfig>> {
    let ok: Vec<_> = archive.successful().collect();
    let mut front = Vec::new();
    for (_, c, r) in &ok {
        if !ok.iter().any(|(_, _, o)| dominates(o, r)) {
            front.push(ScoredConfig::new(c, r.performance, geom)?);
        }
    }
    front.sort_by(|a, b| {
        a.memory_bytes
            .cmp(&b.memory_bytes)
            .then(b.performance.total_cmp(&a.performance))
            .then(a.config.cmp(&b.config))
    });
    Ok(front)
}

fn uniform_sweep(
    evaluator: &dyn Evaluator,
    space: &SearchSpace,
    budget: u64,
    proxy_steps: u32,
    parallel: usize,
) -> Result<UniformBaseline> {
    let meta = evaluator.meta();
    let mut configs = Vec::new();
    for &b in space.bits() {
        for &r in space.ranks() {
            let c = space.uniform(meta.layers, LayerConfig::new(b, r));
            if memory_footprint(&c, &meta.geometry)? <= budget {
                configs.push(c);
            }
        }
    }
    let results = evaluate_batch(evaluator, &configs, proxy_steps, parallel);
    let mut best: Option<ScoredConfig> = None;
    for (c, r) in configs.iter().zip(&results) {
        if let Ok(r) = r {
            if best.as_ref().is_none_or(|b| r.performance > b.performance) {
                best = Some(ScoredConfig::new(c, r.performance, &meta.geometry)?);
            }
        }
    }
    Ok(UniformBaseline {
        best,
        feasible: configs.len(),
        evaluations: configs.len(),
    })
}

fn best_so_far(trace: &[TraceRow], value: f64) -> f64 {
    trace.last().map_or(value, |t| t.best_perf.max(value))
}

/// Runs the enabled phases in order against `evaluator`.
pub fn run(spec: &RunSpec, evaluator: &dyn Evaluator) -> Result<RunReport> {
    if spec.skip_phase1 && spec.skip_phase2 && spec.skip_phase3 {
        return Err(Error::InvalidParameter("every phase is disabled".into()));
    }
    let space = spec.space()?;
    let params = spec.evolve_params();
    params.validate()?;

    let override_meta = match &spec.geometry {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let geometry = ModelGeometry::from_json_str(&text)?;
            if geometry.len() != evaluator.meta().layers {
                return Err(Error::LengthMismatch {
                    config: evaluator.meta().layers,
                    geometry: geometry.len(),
                });
            }
            Some(EvaluatorMeta {
                geometry,
                ..evaluator.meta().clone()
            })
        }
        None => None,
    };
    let wrapped;
    let evaluator: &dyn Evaluator = match override_meta {
        Some(meta) => {
            wrapped = GeometryOverride {
                inner: evaluator,
                meta,
            };
            &wrapped
        }
        None => evaluator,
    };

    let meta = evaluator.meta();
    let geom = &meta.geometry;
    geom.validate()?;
    let layers = meta.layers;
    let budget = spec.budget(&space, geom)?;
    let minimum = memory_footprint(&space.min_config(layers), geom)?;
    if budget < minimum {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let parallel = spec.effective_parallel();

    let mut archive = Archive::new();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut errors = Vec::new();

    // Phase I
    let (profile, priorities, seed) = if spec.skip_phase1 {
        let uniform = vec![1.0 / layers as f64; layers];
        let mid = space.uniform(layers, space.median_layer());
        let seed = repair_to_budget(&mid, &uniform, &space, geom, budget)?;
        (None, uniform, seed)
    } else {
        let calib = spec.calib_size.unwrap_or(meta.calib_size);
        let profile = sensitivity_profile(evaluator, &space, calib, parallel)?;
        if profile.degenerate {
            warnings.push("all sensitivity scores are zero; profile is uniform".to_string());
        }
        let seed = fit_seed_to_budget(&profile, &space, geom, budget)?;
        let priorities = profile.normalized.clone();
        (Some(profile), priorities, seed)
    };
    let seed_idx = archive.evaluate_one(&seed, evaluator, spec.proxy_steps);
    let seed_scored = match &archive.get(seed_idx).result {
        Ok(r) => Some(ScoredConfig::new(&seed, r.performance, geom)?),
        Err(e) => {
            errors.push(format!("seed evaluation failed: {e}"));
            None
        }
    };
    let seed_perf = seed_scored.as_ref().map_or(f64::NEG_INFINITY, |s| s.performance);
    trace.push(TraceRow {
        phase: if spec.skip_phase1 { "seed" } else { "profile" },
        step: 0,
        best_perf: seed_perf,
        evals: archive.evaluations(),
    });

    let ctx = SearchContext {
        space: &space,
        evaluator,
        budget,
        priorities: &priorities,
    };

    // Phase II
    let mut generations = Vec::new();
    let mut front: Vec<ModelConfig> = if seed_scored.is_some() {
        vec![seed.clone()]
    } else {
        Vec::new()
    };
    if !spec.skip_phase2 {
        match evolve(&seed, &params, &ctx, &mut archive) {
            Ok(out) => {
                for g in &out.trace {
                    let best = best_so_far(&trace, g.best_performance);
                    trace.push(TraceRow {
                        phase: "evolve",
                        step: g.generation,
                        best_perf: best,
                        evals: g.evaluations,
                    });
                }
                generations = out.trace;
                front = out.front.into_iter().map(|i| i.config).collect();
            }
            Err(e) => errors.push(format!("evolutionary search failed: {e}")),
        }
    }

    // Phase III
    let mut refine_rounds = Vec::new();
    if !spec.skip_phase3 && !front.is_empty() {
        let params = RefineParams {
            iters_per_config: spec.bo_iters,
            proxy_steps: spec.proxy_steps,
            ..RefineParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0b5e_55ed_0000_0003);
        match refine(&front, &params, &ctx, &mut archive, &mut rng) {
            Ok(out) => {
                for (k, r) in out.rounds.iter().enumerate() {
                    let best = best_so_far(&trace, r.best_performance);
                    trace.push(TraceRow {
                        phase: "refine",
                        step: k + 1,
                        best_perf: best,
                        evals: r.evaluations,
                    });
                }
                warnings.extend(out.warnings);
                refine_rounds = out.rounds;
            }
            Err(e) => errors.push(format!("bayesian refinement failed: {e}")),
        }
    }

    let best = match archive.best() {
        Some(i) => {
            let e = archive.get(i);
            let r = e.result.as_ref().expect("best is successful");
            Some(ScoredConfig::new(&e.config, r.performance, geom)?)
        }
        None => {
            errors.push("no configuration was evaluated successfully".into());
            None
        }
    };
    let pearson_r = match (&profile, &best) {
        (Some(p), Some(b)) => {
            let bits: Vec<f64> = b.config.bits().iter().map(|&x| x as f64).collect();
            match pearson(&bits, &p.scores) {
                Ok(r) => Some(r),
                Err(e) => {
                    warnings.push(format!("bit/sensitivity correlation: {e}"));
                    None
                }
            }
        }
        _ => None,
    };
    let uniform_baseline = if spec.uniform_baseline {
        Some(uniform_sweep(
            evaluator,
            &space,
            budget,
            spec.proxy_steps,
            parallel,
        )?)
    } else {
        None
    };

    Ok(RunReport {
        budget_bytes: budget,
        layers,
        phases: PhaseFlags {
            profile: !spec.skip_phase1,
            evolve: !spec.skip_phase2,
            refine: !spec.skip_phase3,
        },
        profile,
        seed: seed_scored,
        generations,
        refine_rounds,
        trace,
        pareto: pareto_set(&archive, geom)?,
        best,
        pearson_bits_vs_sensitivity: pearson_r,
        uniform_baseline,
        evaluations: archive.evaluations(),
        failed_evaluations: archive.failures(),
        proxy_steps_total: archive.proxy_steps_total(),
        warnings,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::SyntheticModel;

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // sxy = 3, sxx = 2, syy = 14/3
        let r = pearson(&xs, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r - 0.9820).abs() < 1e-4);
        assert!(pearson(&xs, &[1.0, 1.0, 1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn avg_bits_budget_matches_uniform_footprint() {
        let space = SearchSpace::default();
        let geom = ModelGeometry::uniform_square(4, 32, 2);
        let b = budget_from_avg_bits(4.0, &space, &geom).unwrap();
        let c = space.uniform(4, LayerConfig::new(4, 8));
        assert_eq!(b, memory_footprint(&c, &geom).unwrap());
    }

    #[test]
    fn profile_only_run() {
        let m = SyntheticModel::new(SyntheticParams::default()).unwrap();
        let spec = RunSpec {
            skip_phase2: true,
            skip_phase3: true,
            uniform_baseline: false,
            ..RunSpec::default()
        };
        let report = run(&spec, &m).unwrap();
        assert!(report.profile.is_some());
        assert!(report.seed.is_some());
        assert_eq!(report.evaluations, 1);
        assert!(report.generations.is_empty() && report.refine_rounds.is_empty());
    }

    #[test]
    fn rejects_all_phases_skipped_and_tiny_budget() {
        let m = SyntheticModel::new(SyntheticParams::default()).unwrap();
        let spec = RunSpec {
            skip_phase1: true,
            skip_phase2: true,
            skip_phase3: true,
            ..RunSpec::default()
        };
        assert!(run(&spec, &m).is_err());
        let spec = RunSpec {
            budget_bytes: Some(10),
            ..RunSpec::default()
        };
        assert!(matches!(run(&spec, &m), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn spec_json_uses_flag_names() {
        let spec = RunSpec::from_json_str(
            r#"{"space-bits":[2,4],"budget-avg-bits":3.5,"preset":"main-text","skip-phase3":true,"synthetic":{"layers":4}}"#,
        )
        .unwrap();
        assert_eq!(spec.space_bits, vec![2, 4]);
        assert_eq!(spec.preset, Preset::MainText);
        assert_eq!(spec.evolve_params().population_size, 5);
        assert_eq!(spec.synthetic.layers, 4);
        assert!(RunSpec::from_json_str(r#"{"no-such-flag":1}"#).is_err());
        assert!(RunSpec::from_json_str(r#"{"space-bits":[4,2]}"#).is_err());
    }
}
