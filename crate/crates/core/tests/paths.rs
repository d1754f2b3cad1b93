use cpath::blackbox::Classifier;
use cpath::export::export_paths_json;
use cpath::featgraph::barabasi_graph;
use cpath::pipeline::explain;
use cpath::rng::substream;
use cpath::simgen::{simulate, simulate_barabasi, Scenario, SimConfig};
use cpath::{
    generate_paths, CounterfactualPolicy, Dataset, FeatureGraph, ForestConfig, LabelVector, PathGenConfig,
    RandomForest, Result, StationaryConfig,
};

fn small_forest(data: &Dataset, labels: &LabelVector, seed: u64) -> RandomForest {
    RandomForest::train(
        data,
        labels,
        &ForestConfig {
            n_trees: 40,
            ..ForestConfig::default()
        }
        .with_seed(seed),
    )
    .unwrap()
}

struct Constant;

impl Classifier for Constant {
    fn n_classes(&self) -> u32 {
        2
    }
    fn n_features(&self) -> Option<usize> {
        None
    }
    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        LabelVector::new(vec![2; data.n_rows()], 2)
    }
}

#[test]
fn serial_and_parallel_runs_are_byte_identical() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep1, 4, 5)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 5);
    let graph = FeatureGraph::complete(6).unwrap();
    let names = sim.dataset.names().to_vec();
    for policy in [CounterfactualPolicy::Stochastic, CounterfactualPolicy::threshold(0.2).unwrap()] {
        let mut outputs = Vec::new();
        for threads in [Some(1), Some(3), None] {
            let cfg = PathGenConfig {
                threads,
                ..PathGenConfig::new(300, 4, 11)
            };
            let set = generate_paths(&forest, &sim.dataset, &policy, &graph, &cfg).unwrap();
            outputs.push(export_paths_json(&set, &names).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }
}

#[test]
fn knowledge_graph_paths_follow_edges() {
    let sim = simulate_barabasi(15, 2, 120, 3).unwrap();
    let graph = sim.graph.clone().unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 3);
    for k in [1, 3, 7] {
        let set = generate_paths(
            &forest,
            &sim.dataset,
            &CounterfactualPolicy::Stochastic,
            &graph,
            &PathGenConfig::new(400, k, 8),
        )
        .unwrap();
        assert!(!set.is_empty());
        assert_eq!(set.len() + set.untriggered, set.n_iter);
        for path in &set.paths {
            assert!(!path.is_empty() && path.len() <= k);
            assert_eq!(path.vertices.len(), path.swap_trace.len());
            for pair in path.vertices.windows(2) {
                assert!(graph.has_arc(pair[0], pair[1]), "{:?} leaves the graph", path.vertices);
            }
            assert!(path.swap_trace.iter().all(|&s| (0.0..=1.0).contains(&s)));
        }
    }
}

#[test]
fn complete_graph_paths_never_revisit() {
    let sim = simulate(&SimConfig::new(Scenario::Correlation, 3, 2)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 2);
    let graph = FeatureGraph::complete(5).unwrap();
    let set = generate_paths(
        &forest,
        &sim.dataset,
        &CounterfactualPolicy::Stochastic,
        &graph,
        &PathGenConfig::new(300, 5, 1),
    )
    .unwrap();
    for path in &set.paths {
        let mut seen = path.vertices.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), path.len());
    }
}

#[test]
fn threshold_paths_stop_at_first_crossing() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep2, 2, 9)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 9);
    let graph = FeatureGraph::complete(4).unwrap();
    let kappa = 0.25;
    let set = generate_paths(
        &forest,
        &sim.dataset,
        &CounterfactualPolicy::threshold(kappa).unwrap(),
        &graph,
        &PathGenConfig::new(300, 4, 4),
    )
    .unwrap();
    assert!(!set.is_empty());
    for path in &set.paths {
        let (last, prefix) = path.swap_trace.split_last().unwrap();
        assert!(*last > kappa);
        assert!(prefix.iter().all(|&s| s <= kappa));
    }
}

#[test]
fn degenerate_models_and_policies_give_empty_sets() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep1, 2, 1)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 1);
    let graph = FeatureGraph::complete(4).unwrap();
    let cfg = PathGenConfig::new(200, 4, 0);
    let kappa_one = CounterfactualPolicy::threshold(1.0).unwrap();
    assert!(generate_paths(&forest, &sim.dataset, &kappa_one, &graph, &cfg).unwrap().is_empty());
    for policy in [CounterfactualPolicy::Stochastic, CounterfactualPolicy::threshold(0.0).unwrap()] {
        assert!(generate_paths(&Constant, &sim.dataset, &policy, &graph, &cfg).unwrap().is_empty());
    }
    let e = explain(&Constant, &sim.dataset, &graph, &kappa_one, &cfg, &StationaryConfig::default()).unwrap();
    assert!(e.fraction.is_none() && e.stationary.is_none() && e.matrix.is_zero());
}

#[test]
fn importance_estimates_are_distributions() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep1, 2, 7)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 7);
    let graph = FeatureGraph::complete(4).unwrap();
    let e = explain(
        &forest,
        &sim.dataset,
        &graph,
        &CounterfactualPolicy::Stochastic,
        &PathGenConfig::new(500, 4, 7),
        &StationaryConfig::default(),
    )
    .unwrap();
    for scores in [
        &e.fraction.as_ref().unwrap().scores,
        &e.adjacent.as_ref().unwrap().scores,
        &e.stationary.as_ref().unwrap().importance.scores,
    ] {
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(scores.iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn same_seed_same_paths_different_seed_different_paths() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep1, 2, 3)).unwrap();
    let forest = small_forest(&sim.dataset, &sim.labels, 3);
    let graph = barabasi_graph(4, 1, &mut substream(1, 0)).unwrap();
    let run = |seed| {
        generate_paths(
            &forest,
            &sim.dataset,
            &CounterfactualPolicy::Stochastic,
            &graph,
            &PathGenConfig::new(200, 3, seed),
        )
        .unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
