//! End-to-end expectation propagation on logistic regression graphs with
//! oracle (non-learned) operators: classification quality, agreement
//! between the deterministic and Monte Carlo oracles, and the size of the
//! collected training-message pool.

use kjit::data::synthetic_logistic;
use kjit::expfam::Family;
use kjit::graph::{build_logistic_graph, EpOptions, LogisticGraph, OracleOperator};
use kjit::oracle::Proposal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn posterior_mean(graph: &LogisticGraph) -> Vec<f64> {
    graph
        .posterior_w()
        .expect("posterior is proper")
        .into_iter()
        .map(|(m, _)| m)
        .collect()
}

fn training_error(features: &[Vec<f64>], labels: &[bool], w: &[f64]) -> f64 {
    let wrong = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| {
            let act: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            (act > 0.0) != y
        })
        .count();
    wrong as f64 / labels.len() as f64
}

#[test]
fn quadrature_ep_classifies_its_own_training_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (ds, _) = synthetic_logistic(20, 300, &mut rng);
    let mut built =
        build_logistic_graph(&ds.features, &ds.labels, &vec![(0.0, 1.0); 20]).unwrap();
    let report = built
        .graph
        .run_ep(
            &EpOptions { max_iters: 10, ..EpOptions::default() },
            &mut ChaCha8Rng::seed_from_u64(21),
        )
        .unwrap();
    assert!(report.iterations_run <= 10);
    let err = training_error(&ds.features, &ds.labels, &posterior_mean(&built));
    assert!(err < 0.15, "training error {err}");
}

#[test]
fn importance_sampling_and_quadrature_posteriors_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (ds, _) = synthetic_logistic(5, 100, &mut rng);
    let prior = vec![(0.0, 1.0); 5];
    let opts = EpOptions { max_iters: 10, ..EpOptions::default() };

    let mut quad = build_logistic_graph(&ds.features, &ds.labels, &prior).unwrap();
    quad.graph.run_ep(&opts, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();

    let mut sampled = build_logistic_graph(&ds.features, &ds.labels, &prior).unwrap();
    let proposal = Proposal::logistic_default(); // N(0, 200), 5×10⁵ particles
    sampled.graph.attach_operator(
        LogisticGraph::Z_SLOT,
        Box::new(OracleOperator::logistic_importance(proposal.clone())),
    );
    sampled.graph.attach_operator(
        LogisticGraph::P_SLOT,
        Box::new(OracleOperator::logistic_importance(proposal)),
    );
    sampled.graph.run_ep(&opts, &mut ChaCha8Rng::seed_from_u64(32)).unwrap();

    let mq = posterior_mean(&quad);
    let ms = posterior_mean(&sampled);
    let linf = mq
        .iter()
        .zip(&ms)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    assert!(linf < 0.05, "posterior means differ by {linf} in max norm");
}

#[test]
fn message_pool_grows_with_datasets_iterations_and_factors() {
    let n = 30;
    let iterations = 2;
    let mut pool = Vec::new();
    for seed in 0..3_u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let (ds, _) = synthetic_logistic(4, n, &mut rng);
        let mut built =
            build_logistic_graph(&ds.features, &ds.labels, &vec![(0.0, 1.0); 4]).unwrap();
        let pairs = built
            .graph
            .collect_training_messages(iterations, &mut ChaCha8Rng::seed_from_u64(50 + seed))
            .unwrap();
        // Both logistic directions, every factor, every iteration.
        assert_eq!(pairs.len(), 2 * n * iterations);
        pool.extend(pairs);
    }
    let z_pairs = pool
        .iter()
        .filter(|(_, stats)| stats.family == Family::Gaussian)
        .count();
    assert_eq!(z_pairs, 3 * n * iterations);
    assert_eq!(pool.len() - z_pairs, 3 * n * iterations);
}
