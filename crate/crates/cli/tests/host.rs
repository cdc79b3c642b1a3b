//! The process host driving `bitrank serve-synthetic` children.

use std::time::Duration;

use bitrank::archive::Archive;
use bitrank::evaluator::{evaluate_config, Evaluator, ExternalEvaluator, HostOptions, Perturbation};
use bitrank::evaluator::{SyntheticModel, SyntheticParams};
use bitrank::evolve::{evolve, EvolveParams, SearchContext};
use bitrank::profiling::kl_divergence;
use bitrank::{Error, LayerConfig, ModelConfig, SearchSpace};

const BIN: &str = env!("CARGO_BIN_EXE_bitrank");

fn spawn(layers: usize, connections: usize) -> ExternalEvaluator {
    let argv = vec![
        BIN.to_string(),
        "serve-synthetic".into(),
        "--layers".into(),
        layers.to_string(),
    ];
    ExternalEvaluator::spawn(
        &argv,
        HostOptions {
            connections,
            ..HostOptions::default()
        },
    )
    .unwrap()
}

fn local(layers: usize) -> SyntheticModel {
    SyntheticModel::new(SyntheticParams {
        layers,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn handshake_reports_meta() {
    let ext = spawn(6, 2);
    assert_eq!(ext.live_connections(), 2);
    assert_eq!(ext.meta(), local(6).meta());
}

#[test]
fn evaluate_and_distribution_match_in_process() {
    let ext = spawn(4, 1);
    let m = local(4);
    let c = SearchSpace::default().uniform(4, LayerConfig::new(4, 8));
    assert_eq!(ext.evaluate(&c, 10).unwrap(), m.evaluate(&c, 10).unwrap());
    assert_eq!(ext.evaluate(&c, 3).unwrap(), m.evaluate(&c, 3).unwrap());

    let p = Some(Perturbation { layer: 3, bit: 2 });
    let (a, b) = (ext.distribution(1, p).unwrap(), m.distribution(1, p).unwrap());
    assert!(kl_divergence(&a, &b).unwrap() < 1e-12);
}

#[test]
fn length_violation_is_an_error_response() {
    let ext = spawn(4, 1);
    let short = ModelConfig::new(vec![LayerConfig::new(4, 8); 3]);
    match ext.evaluate(&short, 10) {
        Err(Error::Evaluator(msg)) => assert!(msg.contains('3'), "{msg}"),
        other => panic!("expected evaluator error, got {other:?}"),
    }
    // the connection survives and keeps serving
    assert_eq!(ext.live_connections(), 1);
    let ok = ModelConfig::new(vec![LayerConfig::new(4, 8); 4]);
    assert!(evaluate_config(&ext, &ok, 10).is_ok());
}

#[test]
fn dead_child_fails_cleanly() {
    let argv = vec!["sh".to_string(), "-c".into(), "exit 0".into()];
    assert!(ExternalEvaluator::spawn(&argv, HostOptions::default()).is_err());

    let garbage = vec!["sh".to_string(), "-c".into(), "echo not-json; sleep 5".into()];
    let opts = HostOptions {
        query_timeout: Duration::from_secs(2),
        ..HostOptions::default()
    };
    assert!(matches!(
        ExternalEvaluator::spawn(&garbage, opts),
        Err(Error::Protocol { .. })
    ));
}

#[test]
fn two_generation_search_over_the_wire() {
    let ext = spawn(4, 3);
    let space = SearchSpace::default();
    let seed = space.uniform(4, LayerConfig::new(4, 8));
    let budget = bitrank::space::memory_footprint(&seed, &ext.meta().geometry).unwrap();
    let ctx = SearchContext {
        space: &space,
        evaluator: &ext,
        budget,
        priorities: &[0.25; 4],
    };
    let params = EvolveParams {
        generations: 2,
        parallel: 3,
        ..EvolveParams::appendix()
    };
    let mut archive = Archive::new();
    let out = evolve(&seed, &params, &ctx, &mut archive).unwrap();
    assert_eq!(out.trace.len(), 3);
    assert_eq!(archive.failures(), 0);
    assert!(!out.front.is_empty());
    for (_, c, r) in archive.successful() {
        assert!(r.memory_bytes <= budget, "{c}");
    }
}
