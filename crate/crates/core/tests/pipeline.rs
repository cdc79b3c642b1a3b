use std::fs;

use bitrank::evaluator::{SyntheticModel, SyntheticParams};
use bitrank::pipeline::{budget_from_avg_bits, run, Preset, RunSpec};
use bitrank::report::{emit_reports, read_pareto, read_summary, ALLOCATION_CSV, TRACE_CSV};
use bitrank::space::memory_footprint;
use bitrank::{LayerConfig, ModelGeometry, SearchSpace};

fn model(layers: usize) -> SyntheticModel {
    SyntheticModel::new(SyntheticParams {
        layers,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn spec_json_round_trips_and_rejects_unknown_fields() {
    let spec = RunSpec {
        preset: Preset::MainText,
        budget_avg_bits: Some(3.5),
        seed: 42,
        ..RunSpec::default()
    };
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("\"budget-avg-bits\":3.5"));
    assert_eq!(RunSpec::from_json_str(&text).unwrap(), spec);
    assert!(RunSpec::from_json_str(r#"{"sead": 1}"#).is_err());
    assert!(RunSpec::from_json_str(r#"{"space-bits": []}"#).is_err());
}

#[test]
fn avg_bit_budget_prices_adapters_at_median_rank() {
    let space = SearchSpace::default();
    let geom = ModelGeometry::uniform_square(3, 64, 2);
    let uniform = space.uniform(3, LayerConfig::new(4, 8));
    assert_eq!(
        budget_from_avg_bits(4.0, &space, &geom).unwrap(),
        memory_footprint(&uniform, &geom).unwrap()
    );
    assert!(budget_from_avg_bits(0.0, &space, &geom).is_err());
}

#[test]
fn main_text_preset_runs_small_population() {
    let spec = RunSpec {
        preset: Preset::MainText,
        ..RunSpec::default()
    };
    let r = run(&spec, &model(6)).unwrap();
    assert!(r.succeeded());
    // one offspring per generation
    let evals: Vec<usize> = r.generations.iter().map(|g| g.evaluations).collect();
    assert!(evals.windows(2).all(|w| w[1] - w[0] <= 1), "{evals:?}");
}

#[test]
fn geometry_document_overrides_the_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geom.json");
    let layer = r#"{"frozen_params": 1000, "adapter_in_dims": [10], "adapter_out_dims": [10]}"#;
    fs::write(
        &path,
        format!(r#"{{"layers": [{layer}, {layer}, {layer}, {layer}]}}"#),
    )
    .unwrap();
    let spec = RunSpec {
        geometry: Some(path.clone()),
        gens: Some(1),
        bo_iters: 1,
        ..RunSpec::default()
    };
    let r = run(&spec, &model(4)).unwrap();
    // 4 layers x (1000 params at 4 bits + rank 8 x 20 params x 2 bytes)
    assert_eq!(r.budget_bytes, 4 * (500 + 320));

    fs::write(&path, format!(r#"{{"layers": [{layer}]}}"#)).unwrap();
    assert!(run(&spec, &model(4)).is_err());
}

#[test]
fn report_directory_is_consistent() {
    let spec = RunSpec {
        deterministic: true,
        ..RunSpec::default()
    };
    let r = run(&spec, &model(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&r, dir.path()).unwrap();

    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary.best_performance, r.best.as_ref().map(|b| b.performance));
    assert_eq!(summary.phases, ["profile", "evolve", "refine"]);

    let pareto = read_pareto(dir.path()).unwrap();
    assert!(pareto.windows(2).all(|w| w[0].memory_bytes <= w[1].memory_bytes));
    assert!(pareto.windows(2).all(|w| w[0].perf < w[1].perf));
    let best = r.best.as_ref().unwrap();
    assert_eq!(pareto.last().unwrap().perf, best.performance);

    let trace = fs::read_to_string(dir.path().join(TRACE_CSV)).unwrap();
    let phases: Vec<&str> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(phases.first(), Some(&"profile"));
    assert_eq!(phases.last(), Some(&"refine"));

    let alloc = fs::read_to_string(dir.path().join(ALLOCATION_CSV)).unwrap();
    let row = alloc.lines().nth(8).unwrap();
    let last = best.config.layers()[7];
    assert_eq!(row, format!("7,{},{}", last.bit, last.rank));
}

#[test]
fn noisy_landscape_still_respects_budget() {
    let m = SyntheticModel::new(SyntheticParams {
        noise_scale: 0.05,
        ..Default::default()
    })
    .unwrap();
    for seed in 0..3 {
        let r = run(
            &RunSpec {
                seed,
                ..RunSpec::default()
            },
            &m,
        )
        .unwrap();
        assert!(r.pareto.iter().all(|p| p.memory_bytes <= r.budget_bytes));
        assert!(r.trace.windows(2).all(|w| w[1].best_perf >= w[0].best_perf));
    }
}
