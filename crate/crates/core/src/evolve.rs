//! Phase II: Pareto-ranking genetic search.
//!
//! Generational NSGA-II over [`ModelConfig`] chromosomes. The (bit, rank)
//! tuple of a layer is an atomic gene: crossover exchanges whole tuples and
//! mutation moves at most one step along each axis. Offspring that exceed the
//! memory budget are repaired rather than penalized, so every population
//! member is feasible.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::profiling::repair_to_budget;
use crate::space::{dominates, EvalResult, LayerConfig, ModelConfig, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Individual {
    pub config: ModelConfig,
    pub result: Option<EvalResult>,
    /// Index of the non-dominated front, 0 being the best.
    pub rank: usize,
    pub crowding: f64,
    /// Position in the run's [`Archive`].
    pub archive_index: usize,
}

impl Individual {
    fn performance(&self) -> f64 {
        self.result.as_ref().map_or(f64::NEG_INFINITY, |r| r.performance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationOperator {
    /// One step to a neighboring bit-width and rank.
    #[default]
    Proximity,
    /// Uniform re-sampling of bit-width and rank.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct EvolveParams {
    pub population_size: usize,
    pub generations: usize,
    /// Offspring per generation; `None` produces a full population.
    pub offspring: Option<usize>,
    pub crossover_prob: f64,
    pub mutation_prob_per_layer: f64,
    pub mutation: MutationOperator,
    pub proxy_steps: u32,
    pub tournament_size: usize,
    pub rng_seed: u64,
    /// Concurrent evaluator requests; 1 serializes in index order.
    pub parallel: usize,
}

impl Default for EvolveParams {
    fn default() -> Self {
        Self::appendix()
    }
}

impl EvolveParams {
    /// Population 10, 5 generations, full offspring batches.
    pub fn appendix() -> Self {
        Self {
            population_size: 10,
            generations: 5,
            offspring: None,
            crossover_prob: 0.9,
            mutation_prob_per_layer: 0.1,
            mutation: MutationOperator::Proximity,
            proxy_steps: 10,
            tournament_size: 2,
            rng_seed: 0,
            parallel: 1,
        }
    }

    /// Population 5 with a single offspring per generation.
    pub fn main_text() -> Self {
        Self {
            population_size: 5,
            offspring: Some(1),
            ..Self::appendix()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::InvalidParameter(
                "population_size must be at least 2".into(),
            ));
        }
        for (name, p) in [
            ("crossover_prob", self.crossover_prob),
            ("mutation_prob_per_layer", self.mutation_prob_per_layer),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.tournament_size == 0 {
            return Err(Error::InvalidParameter("tournament_size must be positive".into()));
        }
        if self.offspring == Some(0) {
            return Err(Error::InvalidParameter("offspring must be positive".into()));
        }
        Ok(())
    }

    fn offspring_count(&self) -> usize {
        self.offspring.unwrap_or(self.population_size)
    }
}

/// Fast non-dominated sort. Returns fronts of indices, each ascending.
pub fn non_dominated_sort(results: &[EvalResult]) -> Vec<Vec<usize>> {
    let n = results.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dominators = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&results[i], &results[j]) {
                dominated_by_me[i].push(j);
                dominators[j] += 1;
            } else if dominates(&results[j], &results[i]) {
                dominated_by_me[j].push(i);
                dominators[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominators[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                dominators[j] -= 1;
                if dominators[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// NSGA-II crowding distance over (performance, memory). Boundary points get
/// `+inf`; an objective with zero range contributes nothing.
pub fn crowding_distance(front: &[EvalResult]) -> Vec<f64> {
    let n = front.len();
    let mut distance = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [fn(&EvalResult) -> f64; 2] = [|r| r.performance, |r| r.memory_bytes as f64];
    for objective in &objectives {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| objective(&front[a]).total_cmp(&objective(&front[b])));
        let lo = objective(&front[order[0]]);
        let hi = objective(&front[order[n - 1]]);
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            let gap = objective(&front[order[k + 1]]) - objective(&front[order[k - 1]]);
            distance[order[k]] += gap / range;
        }
    }
    distance
}

/// With probability `prob` builds a child taking each layer's whole tuple from
/// either parent; otherwise returns a copy of `a`.
pub fn layerwise_crossover<R: Rng + ?Sized>(
    a: &ModelConfig,
    b: &ModelConfig,
    prob: f64,
    rng: &mut R,
) -> Result<ModelConfig> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            config: a.len(),
            geometry: b.len(),
        });
    }
    if rng.random::<f64>() >= prob {
        return Ok(a.clone());
    }
    Ok(ModelConfig::new(
        a.layers()
            .iter()
            .zip(b.layers())
            .map(|(x, y)| if rng.random_bool(0.5) { *x } else { *y })
            .collect(),
    ))
}

fn step<R: Rng + ?Sized>(values: &[u32], current: u32, rng: &mut R) -> u32 {
    let Ok(i) = values.binary_search(&current) else {
        return current;
    };
    let last = values.len() - 1;
    let j = match (i == 0, i == last) {
        (true, true) => i,
        (true, false) => 1,
        (false, true) => last - 1,
        (false, false) => {
            if rng.random_bool(0.5) {
                i - 1
            } else {
                i + 1
            }
        }
    };
    values[j]
}

/// Per layer with probability `prob_per_layer`, moves the bit-width and the
/// rank each one step to a neighbor in the sorted sets. Endpoints move inward.
pub fn proximity_mutation<R: Rng + ?Sized>(
    c: &ModelConfig,
    space: &SearchSpace,
    prob_per_layer: f64,
    rng: &mut R,
) -> ModelConfig {
    let mut out = c.clone();
    for lc in out.layers_mut() {
        if rng.random::<f64>() < prob_per_layer {
            lc.bit = step(space.bits(), lc.bit, rng);
            lc.rank = step(space.ranks(), lc.rank, rng);
        }
    }
    out
}

/// Per layer with probability `prob_per_layer`, re-samples bit-width and rank
/// uniformly from the space.
pub fn resample_mutation<R: Rng + ?Sized>(
    c: &ModelConfig,
    space: &SearchSpace,
    prob_per_layer: f64,
    rng: &mut R,
) -> ModelConfig {
    let mut out = c.clone();
    for lc in out.layers_mut() {
        if rng.random::<f64>() < prob_per_layer {
            *lc = LayerConfig::new(
                space.bits()[rng.random_range(0..space.bits().len())],
                space.ranks()[rng.random_range(0..space.ranks().len())],
            );
        }
    }
    out
}

/// (rank, crowding) order: lower rank first, then larger crowding.
fn crowded_cmp(a: &Individual, b: &Individual) -> Ordering {
    a.rank
        .cmp(&b.rank)
        .then_with(|| b.crowding.total_cmp(&a.crowding))
}

/// Samples `k` distinct members and returns the index of the winner by
/// (rank, crowding), ties going to the lower index.
pub fn tournament_select<R: Rng + ?Sized>(pop: &[Individual], k: usize, rng: &mut R) -> Result<usize> {
    if pop.is_empty() {
        return Err(Error::InvalidParameter(
            "tournament over an empty population".into(),
        ));
    }
    let k = k.clamp(1, pop.len());
    let mut entrants = sample(rng, pop.len(), k).into_vec();
    entrants.sort_unstable();
    Ok(entrants
        .into_iter()
        .min_by(|&a, &b| crowded_cmp(&pop[a], &pop[b]).then(a.cmp(&b)))
        .expect("k >= 1"))
}

/// Assigns front rank and crowding distance to every member.
pub fn assign_rank_and_crowding(pop: &mut [Individual]) {
    let results: Vec<EvalResult> = pop
        .iter()
        .map(|i| i.result.clone().expect("population members are evaluated"))
        .collect();
    for (rank, front) in non_dominated_sort(&results).into_iter().enumerate() {
        let members: Vec<EvalResult> = front.iter().map(|&i| results[i].clone()).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&members)) {
            pop[i].rank = rank;
            pop[i].crowding = d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_performance: f64,
    pub front_size: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    /// Final population, ordered by (rank, crowding).
    pub population: Vec<Individual>,
    /// Members of the final population's first front.
    pub front: Vec<Individual>,
    pub trace: Vec<GenerationRecord>,
}

pub struct SearchContext<'a> {
    pub space: &'a SearchSpace,
    pub evaluator: &'a dyn Evaluator,
    pub budget: u64,
    /// Repair priority per layer (normalized sensitivity).
    pub priorities: &'a [f64],
}

impl SearchContext<'_> {
    pub fn repair(&self, c: &ModelConfig) -> Result<ModelConfig> {
        repair_to_budget(
            c,
            self.priorities,
            self.space,
            &self.evaluator.meta().geometry,
            self.budget,
        )
    }
}

fn individuals(archive: &Archive, indices: &[usize]) -> Vec<Individual> {
    let mut seen = std::collections::HashSet::new();
    indices
        .iter()
        .filter(|&&i| seen.insert(i))
        .filter_map(|&i| {
            let e = archive.get(i);
            e.result.as_ref().ok().map(|r| Individual {
                config: e.config.clone(),
                result: Some(r.clone()),
                rank: 0,
                crowding: 0.0,
                archive_index: i,
            })
        })
        .collect()
}

/// Environmental selection: keeps the best `size` members by (rank, crowding),
/// preferring higher performance then earlier archive entries on ties.
fn select_survivors(mut pool: Vec<Individual>, size: usize) -> Vec<Individual> {
    assign_rank_and_crowding(&mut pool);
    pool.sort_by(|a, b| {
        crowded_cmp(a, b)
            .then_with(|| b.performance().total_cmp(&a.performance()))
            .then(a.archive_index.cmp(&b.archive_index))
    });
    pool.truncate(size);
    // ranks and crowding are reported relative to the survivors
    assign_rank_and_crowding(&mut pool);
    pool.sort_by(|a, b| {
        crowded_cmp(a, b)
            .then_with(|| b.performance().total_cmp(&a.performance()))
            .then(a.archive_index.cmp(&b.archive_index))
    });
    pool
}

fn record(generation: usize, pop: &[Individual], archive: &Archive) -> GenerationRecord {
    GenerationRecord {
        generation,
        best_performance: pop
            .iter()
            .map(Individual::performance)
            .fold(f64::NEG_INFINITY, f64::max),
        front_size: pop.iter().filter(|i| i.rank == 0).count(),
        evaluations: archive.evaluations(),
    }
}

/// Runs the genetic search from `seed`, recording every evaluation in
/// `archive`.
pub fn evolve(
    seed: &ModelConfig,
    params: &EvolveParams,
    ctx: &SearchContext<'_>,
    archive: &mut Archive,
) -> Result<EvolveOutcome> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let seed = ctx.repair(seed)?;
    let mutate = |c: &ModelConfig, p: f64, rng: &mut ChaCha8Rng| match params.mutation {
        MutationOperator::Proximity => proximity_mutation(c, ctx.space, p, rng),
        MutationOperator::Resample => resample_mutation(c, ctx.space, p, rng),
    };

    // seed plus distinct mutants of it; at least one layer is expected to move
    let init_prob = params.mutation_prob_per_layer.max(1.0 / seed.len() as f64);
    let mut initial = vec![seed.clone()];
    let mut attempts = 0;
    while initial.len() < params.population_size && attempts < 64 * params.population_size {
        attempts += 1;
        let m = ctx.repair(&mutate(&seed, init_prob, &mut rng))?;
        if !initial.contains(&m) {
            initial.push(m);
        }
    }
    let indices = archive.evaluate_many(&initial, ctx.evaluator, params.proxy_steps, params.parallel);
    let mut population = select_survivors(individuals(archive, &indices), params.population_size);
    let mut trace = vec![record(0, &population, archive)];
    log::info!(
        "generation 0: best {:.6}, evaluations {}",
        trace[0].best_performance,
        archive.evaluations()
    );

    for generation in 1..=params.generations {
        if population.is_empty() {
            break;
        }
        let mut children = Vec::with_capacity(params.offspring_count());
        for _ in 0..params.offspring_count() {
            let a = tournament_select(&population, params.tournament_size, &mut rng)?;
            let b = tournament_select(&population, params.tournament_size, &mut rng)?;
            let child = layerwise_crossover(
                &population[a].config,
                &population[b].config,
                params.crossover_prob,
                &mut rng,
            )?;
            let child = mutate(&child, params.mutation_prob_per_layer, &mut rng);
            children.push(ctx.repair(&child)?);
        }
        let child_idx = archive.evaluate_many(&children, ctx.evaluator, params.proxy_steps, params.parallel);
        let mut pool_idx: Vec<usize> = population.iter().map(|i| i.archive_index).collect();
        pool_idx.extend(child_idx);
        population = select_survivors(individuals(archive, &pool_idx), params.population_size);
        let rec = record(generation, &population, archive);
        log::info!(
            "generation {generation}: best {:.6}, front {}, evaluations {}",
            rec.best_performance,
            rec.front_size,
            rec.evaluations
        );
        trace.push(rec);
    }

    let front = population.iter().filter(|i| i.rank == 0).cloned().collect();
    Ok(EvolveOutcome {
        population,
        front,
        trace,
    })
}
