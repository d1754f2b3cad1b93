//! Synthetic benchmarks with two planted signal features.
//!
//! The four tabular scenarios draw an `n × (2 + noise)` matrix of
//! `Normal(0, sd = 2)` values and Bernoulli(0.5) prior labels, then
//! overwrite labels from the first two columns. The graph scenario builds a
//! Barabási–Albert feature graph and draws labels through a logistic link
//! on two adjacent features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featgraph::{barabasi_graph, FeatureGraph};
use crate::rng::substream;
use crate::tabular::{Dataset, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    CondDep1,
    CondDep2,
    Correlation,
    CondIndep,
    Barabasi,
}

impl Scenario {
    pub const TABULAR: [Scenario; 4] = [
        Scenario::CondDep1,
        Scenario::CondDep2,
        Scenario::Correlation,
        Scenario::CondIndep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CondDep1 => "cond-dep-1",
            Scenario::CondDep2 => "cond-dep-2",
            Scenario::Correlation => "correlation",
            Scenario::CondIndep => "cond-indep",
            Scenario::Barabasi => "barabasi",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Scenario::CondDep1,
            Scenario::CondDep2,
            Scenario::Correlation,
            Scenario::CondIndep,
            Scenario::Barabasi,
        ]
        .into_iter()
        .find(|sc| sc.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario {s:?}")))
    }
}

/// Label (0 or 1) of one row given its first two features and its prior
/// draw.
pub fn scenario_label(scenario: Scenario, d1: f64, d2: f64, prior: u8) -> u8 {
    match scenario {
        Scenario::CondDep1 => {
            if d1 >= 0.0 {
                if d2 >= 0.0 {
                    return 1;
                }
            } else if d2 >= 0.0 {
                return 0;
            }
            prior
        }
        Scenario::CondDep2 => {
            if d1 >= 0.0 {
                if d2 <= 0.0 {
                    1
                } else {
                    0
                }
            } else {
                prior
            }
        }
        Scenario::Correlation => {
            if d1 >= 0.0 && d2 >= 0.0 {
                1
            } else {
                prior
            }
        }
        Scenario::CondIndep => {
            if d1 >= 0.0 && d2 >= 0.0 {
                prior
            } else if d1 >= 0.0 {
                1
            } else if d2 >= 0.0 {
                0
            } else {
                prior
            }
        }
        Scenario::Barabasi => prior,
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One Bernoulli(S(z)) outcome; consumes one draw.
pub fn draw_outcome<R: Rng + ?Sized>(z: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < sigmoid(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n_rows: usize,
    pub n_noise: usize,
    pub seed: u64,
    /// Graph size for the barabasi scenario.
    pub n_vertices: usize,
    /// Edges per new vertex for the barabasi scenario.
    pub m: usize,
}

impl SimConfig {
    pub fn new(scenario: Scenario, n_noise: usize, seed: u64) -> Self {
        SimConfig {
            scenario,
            n_rows: 100,
            n_noise,
            seed,
            n_vertices: 20,
            m: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    pub labels: LabelVector,
    /// Planted signal columns (0-based).
    pub signal_features: Vec<usize>,
    pub graph: Option<FeatureGraph>,
}

// Substream layout of a simulation seed.
const STREAM_FEATURES: u64 = 0;
const STREAM_PRIOR: u64 = 1;
const STREAM_GRAPH: u64 = 2;
const STREAM_PAIR: u64 = 3;

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    if config.n_rows == 0 {
        return Err(Error::InvalidConfig("n_rows must be at least 1".into()));
    }
    if config.scenario == Scenario::Barabasi {
        return simulate_barabasi(config.n_vertices, config.m, config.n_rows, config.seed);
    }
    let p = 2 + config.n_noise;
    let n = config.n_rows;
    let normal = Normal::new(0.0, 2.0).expect("valid normal");
    let mut rng = substream(config.seed, STREAM_FEATURES);
    let columns: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut prior_rng = substream(config.seed, STREAM_PRIOR);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let labels: Vec<u32> = (0..n)
        .map(|i| {
            let prior = coin.sample(&mut prior_rng) as u8;
            scenario_label(config.scenario, columns[0][i], columns[1][i], prior) as u32 + 1
        })
        .collect();
    Ok(SimOutput {
        dataset: Dataset::from_columns(Dataset::default_names(p), columns)?,
        labels: LabelVector::new(labels, 2)?,
        signal_features: vec![0, 1],
        graph: None,
    })
}

/// Features on a Barabási–Albert graph; labels ~ Bernoulli(S(5·x_a + 3·x_b))
/// for a uniformly chosen edge `(a, b)` in random orientation.
pub fn simulate_barabasi(n_vertices: usize, m: usize, n_rows: usize, seed: u64) -> Result<SimOutput> {
    if n_vertices < 2 {
        return Err(Error::InvalidConfig("barabasi scenario needs at least 2 vertices".into()));
    }
    if n_rows == 0 {
        return Err(Error::InvalidConfig("n_rows must be at least 1".into()));
    }
    let graph = barabasi_graph(n_vertices, m, &mut substream(seed, STREAM_GRAPH))?;
    let edges = graph.undirected_edges();
    if edges.is_empty() {
        return Err(Error::InvalidGraph("graph has no edges".into()));
    }
    let mut pair_rng = substream(seed, STREAM_PAIR);
    let (a, b) = edges[pair_rng.random_range(0..edges.len())];
    let (v1, v2) = if pair_rng.random::<bool>() { (a, b) } else { (b, a) };

    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rng = substream(seed, STREAM_FEATURES);
    let columns: Vec<Vec<f64>> = (0..n_vertices)
        .map(|_| (0..n_rows).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut outcome_rng = substream(seed, STREAM_PRIOR);
    let labels: Vec<u32> = (0..n_rows)
        .map(|i| {
            let z = 5.0 * columns[v1][i] + 3.0 * columns[v2][i];
            draw_outcome(z, &mut outcome_rng) as u32 + 1
        })
        .collect();
    Ok(SimOutput {
        dataset: Dataset::from_columns(Dataset::default_names(n_vertices), columns)?,
        labels: LabelVector::new(labels, 2)?,
        signal_features: vec![v1, v2],
        graph: Some(graph),
    })
}
