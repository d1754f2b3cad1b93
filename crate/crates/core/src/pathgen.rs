//! Counterfactual path sampling.
//!
//! Each iteration starts from the untouched dataset, walks the feature
//! graph, and permutes every visited column on top of the permutations
//! already applied in that iteration. After each step the share of changed
//! predictions is recorded and the policy is consulted; the first firing
//! step ends the walk and the path is kept. Walks that run out of length or
//! of vertices without firing are dropped.
//!
//! Iteration `i` draws all of its randomness from substream `i` of the
//! seed, so results do not depend on scheduling or thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{check_width, Classifier};
use crate::error::{Error, Result};
use crate::featgraph::FeatureGraph;
use crate::policy::{changed_fraction, CounterfactualPolicy};
use crate::rng::substream;
use crate::tabular::{Dataset, LabelVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPath {
    /// Feature indices in visiting order.
    pub vertices: Vec<usize>,
    /// Changed-prediction fraction after each prefix of `vertices`.
    pub swap_trace: Vec<f64>,
    #[serde(default = "default_triggered")]
    pub triggered: bool,
}

fn default_triggered() -> bool {
    true
}

impl CounterfactualPath {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn final_swap(&self) -> Option<f64> {
        self.swap_trace.last().copied()
    }
}

/// The stored counterfactual paths of one run. Duplicates are kept: the
/// same path found twice counts twice.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<CounterfactualPath>,
    pub n_iter: usize,
    pub k: usize,
    /// Number of features (vertices) the paths range over.
    pub n_features: usize,
    /// Iterations that ended without the policy firing.
    pub untriggered: usize,
}

impl PathSet {
    pub fn empty(n_features: usize, k: usize) -> Self {
        PathSet {
            paths: Vec::new(),
            n_iter: 0,
            k,
            n_features,
            untriggered: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGenConfig {
    pub n_iter: usize,
    /// Maximum path length.
    pub k: usize,
    pub seed: u64,
    /// Worker threads: `None` uses the ambient rayon pool, `Some(1)` runs
    /// serially, `Some(0)` picks automatically.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Stop once this many paths are stored. Iterations still run in index
    /// order, so the result is the first `max_paths` paths of the full run
    /// and `n_iter` reports how many iterations were consumed.
    #[serde(default)]
    pub max_paths: Option<usize>,
}

impl PathGenConfig {
    pub fn new(n_iter: usize, k: usize, seed: u64) -> Self {
        PathGenConfig {
            n_iter,
            k,
            seed,
            threads: None,
            max_paths: None,
        }
    }
}

/// Samples counterfactual paths against `model`.
///
/// Worst case makes `n_iter × k + 1` prediction calls.
pub fn generate_paths(
    model: &dyn Classifier,
    data: &Dataset,
    policy: &CounterfactualPolicy,
    graph: &FeatureGraph,
    config: &PathGenConfig,
) -> Result<PathSet> {
    if config.k == 0 {
        return Err(Error::InvalidConfig("path length k must be at least 1".into()));
    }
    if config.n_iter == 0 {
        return Err(Error::InvalidConfig("n_iter must be at least 1".into()));
    }
    if graph.n_vertices() != data.n_features() {
        return Err(Error::InvalidConfig(format!(
            "graph has {} vertices but dataset has {} features",
            graph.n_vertices(),
            data.n_features()
        )));
    }
    if let CounterfactualPolicy::Threshold { kappa } = policy {
        if !(0.0..=1.0).contains(kappa) {
            return Err(Error::InvalidConfig(format!("kappa {kappa} outside [0, 1]")));
        }
    }
    check_width(model, data)?;
    let baseline = model.predict(data)?;

    if config.max_paths == Some(0) {
        return Err(Error::InvalidConfig("max_paths must be at least 1".into()));
    }
    let run = |i: usize| {
        sample_one(model, data, &baseline, policy, graph, config, i).map_err(|e| Error::Iteration {
            index: i,
            source: Box::new(e),
        })
    };
    let pool = match config.threads {
        Some(t) if t != 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        ),
        _ => None,
    };
    let batch = |range: std::ops::Range<usize>| -> Vec<Result<Option<CounterfactualPath>>> {
        match (&pool, config.threads) {
            (_, Some(1)) => range.map(run).collect(),
            (Some(pool), _) => pool.install(|| range.into_par_iter().map(run).collect()),
            (None, _) => range.into_par_iter().map(run).collect(),
        }
    };

    let mut set = PathSet {
        paths: Vec::new(),
        n_iter: 0,
        k: config.k,
        n_features: data.n_features(),
        untriggered: 0,
    };
    let chunk = match config.max_paths {
        Some(m) => m.max(rayon::current_num_threads()).max(16),
        None => config.n_iter,
    };
    let mut start = 0;
    'outer: while start < config.n_iter {
        let end = (start + chunk).min(config.n_iter);
        for outcome in batch(start..end) {
            match outcome? {
                Some(path) => set.paths.push(path),
                None => set.untriggered += 1,
            }
            set.n_iter += 1;
            if config.max_paths.is_some_and(|m| set.paths.len() >= m) {
                break 'outer;
            }
        }
        start = end;
    }
    Ok(set)
}

fn sample_one(
    model: &dyn Classifier,
    data: &Dataset,
    baseline: &LabelVector,
    policy: &CounterfactualPolicy,
    graph: &FeatureGraph,
    config: &PathGenConfig,
    iteration: usize,
) -> Result<Option<CounterfactualPath>> {
    let mut rng = substream(config.seed, iteration as u64);
    let mut work = data.clone();
    let mut visited = vec![false; data.n_features()];
    let mut vertices = Vec::with_capacity(config.k);
    let mut swap_trace = Vec::with_capacity(config.k);

    let mut next = Some(graph.sample_start_vertex(&mut rng));
    while let Some(v) = next {
        vertices.push(v);
        visited[v] = true;
        work.permute_column_in_place(v, &mut rng)?;
        let perturbed = model.predict(&work)?;
        let p = changed_fraction(baseline, &perturbed)?;
        swap_trace.push(p);
        if policy.evaluate(p, &mut rng) {
            return Ok(Some(CounterfactualPath {
                vertices,
                swap_trace,
                triggered: true,
            }));
        }
        if vertices.len() == config.k {
            break;
        }
        next = graph.sample_next_vertex(v, &visited, &mut rng);
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Predicts class 2 when column `j` is positive.
    struct SignOf(usize);
    impl Classifier for SignOf {
        fn n_classes(&self) -> u32 {
            2
        }
        fn n_features(&self) -> Option<usize> {
            None
        }
        fn predict(&self, data: &Dataset) -> Result<LabelVector> {
            LabelVector::new(
                data.column(self.0).iter().map(|&v| if v > 0.0 { 2 } else { 1 }).collect(),
                2,
            )
        }
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
            LabelVector::new(vec![1; data.n_rows()], 2)
        }
    }

    fn alternating(p: usize, n: usize) -> Dataset {
        let cols = (0..p)
            .map(|j| (0..n).map(|i| if (i + j) % 2 == 0 { 1.0 } else { -1.0 } * (i + 1) as f64).collect())
            .collect();
        Dataset::from_columns(Dataset::default_names(p), cols).unwrap()
    }

    #[test]
    fn constant_model_yields_no_paths() {
        let d = alternating(3, 20);
        let g = FeatureGraph::complete(3).unwrap();
        for policy in [CounterfactualPolicy::Stochastic, CounterfactualPolicy::Threshold { kappa: 0.0 }] {
            let set = generate_paths(&Constant, &d, &policy, &g, &PathGenConfig::new(50, 3, 1)).unwrap();
            assert!(set.is_empty());
            assert_eq!(set.untriggered, 50);
        }
    }

    #[test]
    fn length_one_paths_with_zero_threshold() {
        let d = alternating(1, 40);
        let g = FeatureGraph::complete(1).unwrap();
        let policy = CounterfactualPolicy::Threshold { kappa: 0.0 };
        let set = generate_paths(&SignOf(0), &d, &policy, &g, &PathGenConfig::new(30, 1, 9)).unwrap();
        // 40 alternating rows: a permutation that fixes every sign is possible
        // but vanishingly rare for this seed; each iteration should store a path
        assert_eq!(set.len(), 30);
        for path in &set.paths {
            assert_eq!(path.vertices, vec![0]);
            assert!(path.swap_trace[0] > 0.0);
        }
    }

    #[test]
    fn kappa_one_gives_empty_set() {
        let d = alternating(3, 30);
        let g = FeatureGraph::complete(3).unwrap();
        let policy = CounterfactualPolicy::Threshold { kappa: 1.0 };
        let set = generate_paths(&SignOf(1), &d, &policy, &g, &PathGenConfig::new(40, 3, 2)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn complete_walk_stops_at_exhaustion() {
        let d = alternating(2, 10);
        let g = FeatureGraph::complete(2).unwrap();
        let set = generate_paths(&Constant, &d, &CounterfactualPolicy::Stochastic, &g, &PathGenConfig::new(5, 10, 0)).unwrap();
        assert_eq!(set.untriggered, 5);
    }

    #[test]
    fn rejects_bad_config() {
        let d = alternating(2, 10);
        let g = FeatureGraph::complete(3).unwrap();
        let s = CounterfactualPolicy::Stochastic;
        assert!(matches!(
            generate_paths(&Constant, &d, &s, &g, &PathGenConfig::new(5, 2, 0)),
            Err(Error::InvalidConfig(_))
        ));
        let g = FeatureGraph::complete(2).unwrap();
        assert!(generate_paths(&Constant, &d, &s, &g, &PathGenConfig::new(5, 0, 0)).is_err());
        assert!(generate_paths(&Constant, &d, &s, &g, &PathGenConfig::new(0, 2, 0)).is_err());
        let zero_budget = PathGenConfig {
            max_paths: Some(0),
            ..PathGenConfig::new(5, 2, 0)
        };
        assert!(generate_paths(&Constant, &d, &s, &g, &zero_budget).is_err());
    }

    #[test]
    fn path_budget_keeps_the_first_paths() {
        let d = alternating(3, 40);
        let g = FeatureGraph::complete(3).unwrap();
        let policy = CounterfactualPolicy::Stochastic;
        let full = generate_paths(&SignOf(1), &d, &policy, &g, &PathGenConfig::new(200, 3, 6)).unwrap();
        for threads in [Some(1), None] {
            let cfg = PathGenConfig {
                max_paths: Some(25),
                threads,
                ..PathGenConfig::new(200, 3, 6)
            };
            let capped = generate_paths(&SignOf(1), &d, &policy, &g, &cfg).unwrap();
            assert_eq!(capped.paths, full.paths[..25].to_vec());
            assert_eq!(capped.len() + capped.untriggered, capped.n_iter);
            assert!(capped.n_iter < 200);
        }
    }

    struct FailsAfter(std::sync::atomic::AtomicUsize);
    impl Classifier for FailsAfter {
        fn n_classes(&self) -> u32 {
            2
        }
        fn n_features(&self) -> Option<usize> {
            None
        }
        fn predict(&self, data: &Dataset) -> Result<LabelVector> {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= 1 {
                return Err(Error::Protocol("boom".into()));
            }
            LabelVector::new(vec![1; data.n_rows()], 2)
        }
    }

    #[test]
    fn model_errors_carry_iteration_index() {
        let d = alternating(2, 10);
        let g = FeatureGraph::complete(2).unwrap();
        let model = FailsAfter(Default::default());
        let cfg = PathGenConfig { threads: Some(1), ..PathGenConfig::new(3, 2, 0) };
        let err = generate_paths(&model, &d, &CounterfactualPolicy::Stochastic, &g, &cfg).unwrap_err();
        assert!(matches!(err, Error::Iteration { index: 0, .. }));
        assert!(matches!(err.root(), Error::Protocol(_)));
    }
}
