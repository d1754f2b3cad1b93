//! Aggregating counterfactual paths into a weighted feature graph and
//! reading importance off it.
//!
//! A path of length `l` found with maximum length `k` adds `k − l + 1` to
//! each of its arcs (or to the self-loop of its only vertex when `l = 1`),
//! so short paths weigh more.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathgen::PathSet;

/// `p × p` integer arc weights, row = source feature, column = target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    p: usize,
    k: usize,
    weights: Vec<u64>,
}

impl TransitionMatrix {
    pub fn zeros(p: usize, k: usize) -> Self {
        TransitionMatrix {
            p,
            k,
            weights: vec![0; p * p],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>], k: usize) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidConfig("transition matrix must be square".into()));
        }
        Ok(TransitionMatrix {
            p,
            k,
            weights: rows.concat(),
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.weights[from * self.p + to]
    }

    fn add(&mut self, from: usize, to: usize, w: u64) {
        self.weights[from * self.p + to] += w;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.weights.chunks(self.p.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.weights.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0)
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.weights[i * self.p..(i + 1) * self.p].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        (0..self.p).map(|i| self.get(i, j)).sum()
    }

    /// Nonzero arcs in row-major order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0)
            .map(move |(idx, &w)| (idx / self.p, idx % self.p, w))
    }

    /// Elementwise sum of two matrices built with the same `p` and `k`.
    pub fn merged(&self, other: &TransitionMatrix) -> Result<TransitionMatrix> {
        if self.p != other.p || self.k != other.k {
            return Err(Error::InvalidConfig("matrices differ in p or k".into()));
        }
        Ok(TransitionMatrix {
            p: self.p,
            k: self.k,
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Accumulates arc weights from every stored path.
pub fn build_transition_matrix(paths: &PathSet) -> Result<TransitionMatrix> {
    if paths.k == 0 {
        return Err(Error::InvalidConfig("path length k must be at least 1".into()));
    }
    let p = paths.n_features;
    let mut t = TransitionMatrix::zeros(p, paths.k);
    for path in &paths.paths {
        let l = path.vertices.len();
        if l == 0 || l > paths.k {
            return Err(Error::InvalidConfig(format!(
                "path length {l} outside 1..={}",
                paths.k
            )));
        }
        if let Some(&bad) = path.vertices.iter().find(|&&v| v >= p) {
            return Err(Error::FeatureOutOfRange { index: bad, p });
        }
        let w = (paths.k - l + 1) as u64;
        if l == 1 {
            t.add(path.vertices[0], path.vertices[0], w);
        }
        for pair in path.vertices.windows(2) {
            t.add(pair[0], pair[1], w);
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    /// Share of incoming arc weight.
    Fraction,
    /// Share of arc weight touching the feature, incoming or outgoing.
    Adjacent,
    /// Stationary distribution of the row-normalized chain.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub method: ImportanceMethod,
}

/// Incoming weight of each feature over the total weight: column sums of
/// `T` (self-loops included) divided by the sum of all entries.
pub fn importance_fraction(t: &TransitionMatrix) -> Result<ImportanceVector> {
    let total = t.total();
    if total == 0 {
        return Err(Error::NoCounterfactuals);
    }
    let scores = (0..t.p())
        .map(|j| t.column_sum(j) as f64 / total as f64)
        .collect();
    Ok(ImportanceVector {
        scores,
        method: ImportanceMethod::Fraction,
    })
}

/// Weight of arcs with the feature at either end (a self-loop counted once),
/// normalized to sum to one.
pub fn importance_adjacent(t: &TransitionMatrix) -> Result<ImportanceVector> {
    if t.is_zero() {
        return Err(Error::NoCounterfactuals);
    }
    let touching: Vec<u64> = (0..t.p())
        .map(|j| t.row_sum(j) + t.column_sum(j) - t.get(j, j))
        .collect();
    let total: u64 = touching.iter().sum();
    Ok(ImportanceVector {
        scores: touching.iter().map(|&w| w as f64 / total as f64).collect(),
        method: ImportanceMethod::Adjacent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryConfig {
    /// Weight of the uniform teleport mixed into every row.
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            damping: 0.01,
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryImportance {
    pub importance: ImportanceVector,
    /// `‖πP − π‖₁` at the returned π.
    pub residual: f64,
    pub iterations: usize,
}

/// Row-stochastic matrix used for the stationary distribution: rows of `T`
/// normalized, empty rows replaced by the uniform row, then mixed with the
/// uniform teleport: `(1 − d)·P + d/p`.
pub fn damped_chain(t: &TransitionMatrix, damping: f64) -> Vec<Vec<f64>> {
    let p = t.p();
    let uniform = 1.0 / p as f64;
    (0..p)
        .map(|i| {
            let sum = t.row_sum(i);
            (0..p)
                .map(|j| {
                    let base = if sum == 0 {
                        uniform
                    } else {
                        t.get(i, j) as f64 / sum as f64
                    };
                    (1.0 - damping) * base + damping * uniform
                })
                .collect()
        })
        .collect()
}

fn step(pi: &[f64], chain: &[Vec<f64>]) -> Vec<f64> {
    let p = pi.len();
    let mut next = vec![0.0; p];
    for (i, row) in chain.iter().enumerate() {
        let mass = pi[i];
        if mass == 0.0 {
            continue;
        }
        for (n, &pij) in next.iter_mut().zip(row) {
            *n += mass * pij;
        }
    }
    let s: f64 = next.iter().sum();
    next.iter_mut().for_each(|v| *v /= s);
    next
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Power iteration for `π = πP'` from the uniform distribution.
pub fn importance_stationary(t: &TransitionMatrix, config: &StationaryConfig) -> Result<StationaryImportance> {
    if t.is_zero() {
        return Err(Error::NoCounterfactuals);
    }
    if !(0.0..=1.0).contains(&config.damping) {
        return Err(Error::InvalidConfig(format!("damping {} outside [0, 1]", config.damping)));
    }
    let p = t.p();
    let chain = damped_chain(t, config.damping);
    let mut pi = vec![1.0 / p as f64; p];
    let mut residual = f64::INFINITY;
    for iteration in 0..=config.max_iters {
        let next = step(&pi, &chain);
        residual = l1(&next, &pi);
        if residual < config.tol {
            return Ok(StationaryImportance {
                importance: ImportanceVector {
                    scores: pi,
                    method: ImportanceMethod::Stationary,
                },
                residual,
                iterations: iteration,
            });
        }
        pi = next;
    }
    Err(Error::NotConverged {
        iterations: config.max_iters,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathgen::CounterfactualPath;
    use approx::assert_abs_diff_eq;

    fn set(paths: &[&[usize]], k: usize, p: usize) -> PathSet {
        PathSet {
            paths: paths
                .iter()
                .map(|v| CounterfactualPath {
                    vertices: v.to_vec(),
                    swap_trace: vec![0.5; v.len()],
                    triggered: true,
                })
                .collect(),
            n_iter: paths.len(),
            k,
            n_features: p,
            untriggered: 0,
        }
    }

    #[test]
    fn worked_example() {
        // (1,2,3) and (2) in 1-based terms, k = 3
        let t = build_transition_matrix(&set(&[&[0, 1, 2], &[1]], 3, 3)).unwrap();
        assert_eq!(t.rows(), vec![vec![0, 1, 0], vec![0, 3, 1], vec![0, 0, 0]]);
        let imp = importance_fraction(&t).unwrap();
        assert_eq!(imp.scores, vec![0.0, 4.0 / 5.0, 1.0 / 5.0]);
    }

    #[test]
    fn empty_and_duplicate_sets() {
        let t = build_transition_matrix(&set(&[], 3, 3)).unwrap();
        assert!(t.is_zero());
        assert!(matches!(importance_fraction(&t), Err(Error::NoCounterfactuals)));
        assert!(matches!(importance_stationary(&t, &Default::default()), Err(Error::NoCounterfactuals)));

        let once = build_transition_matrix(&set(&[&[2, 0]], 4, 3)).unwrap();
        let twice = build_transition_matrix(&set(&[&[2, 0], &[2, 0]], 4, 3)).unwrap();
        assert_eq!(twice.get(2, 0), 2 * once.get(2, 0));
        assert_eq!(twice.total(), 2 * once.total());
    }

    #[test]
    fn rejects_bad_vertices() {
        assert!(matches!(
            build_transition_matrix(&set(&[&[0, 5]], 3, 3)),
            Err(Error::FeatureOutOfRange { index: 5, p: 3 })
        ));
        assert!(build_transition_matrix(&set(&[&[0, 1, 2, 0]], 3, 3)).is_err());
    }

    #[test]
    fn fraction_special_cases() {
        let mut rows = vec![vec![0u64; 3]; 3];
        rows[1][1] = 7;
        let imp = importance_fraction(&TransitionMatrix::from_rows(&rows, 2).unwrap()).unwrap();
        assert_eq!(imp.scores, vec![0.0, 1.0, 0.0]);
        let uniform = TransitionMatrix::from_rows(&vec![vec![2u64; 4]; 4], 2).unwrap();
        assert_eq!(importance_fraction(&uniform).unwrap().scores, vec![0.25; 4]);
    }

    #[test]
    fn adjacent_variant_matches_fraction_on_symmetric_matrices() {
        let t = TransitionMatrix::from_rows(&[vec![0, 2, 1], vec![2, 0, 3], vec![1, 3, 0]], 3).unwrap();
        let a = importance_adjacent(&t).unwrap().scores;
        let f = importance_fraction(&t).unwrap().scores;
        for (x, y) in a.iter().zip(&f) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        let skew = TransitionMatrix::from_rows(&[vec![0, 4], vec![0, 0]], 3).unwrap();
        assert_eq!(importance_adjacent(&skew).unwrap().scores, vec![0.5, 0.5]);
        assert_eq!(importance_fraction(&skew).unwrap().scores, vec![0.0, 1.0]);
    }

    #[test]
    fn stationary_two_cycle() {
        let t = TransitionMatrix::from_rows(&[vec![0, 1], vec![1, 0]], 2).unwrap();
        let cfg = StationaryConfig { damping: 0.0, ..Default::default() };
        let s = importance_stationary(&t, &cfg).unwrap();
        assert_eq!(s.importance.scores, vec![0.5, 0.5]);
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn stationary_absorbing_self_loop() {
        let mut rows = vec![vec![0u64; 4]; 4];
        rows[2][2] = 3;
        let t = TransitionMatrix::from_rows(&rows, 2).unwrap();
        let cfg = StationaryConfig { damping: 0.0, ..Default::default() };
        let s = importance_stationary(&t, &cfg).unwrap();
        for (j, v) in s.importance.scores.iter().enumerate() {
            assert_abs_diff_eq!(*v, if j == 2 { 1.0 } else { 0.0 }, epsilon = 1e-9);
        }
    }

    #[test]
    fn stationary_reports_non_convergence() {
        let t = TransitionMatrix::from_rows(&[vec![0, 1, 0], vec![0, 0, 1], vec![1, 0, 0]], 2).unwrap();
        // a pure 3-cycle started off-uniform would never settle; from the
        // uniform start it is already stationary
        let cfg = StationaryConfig { damping: 0.0, tol: 1e-10, max_iters: 5 };
        assert!(importance_stationary(&t, &cfg).is_ok());
        let chain = TransitionMatrix::from_rows(&[vec![1, 9], vec![1, 1]], 2).unwrap();
        let cfg = StationaryConfig { damping: 0.0, tol: 1e-300, max_iters: 3 };
        assert!(matches!(
            importance_stationary(&chain, &cfg),
            Err(Error::NotConverged { iterations: 3, .. })
        ));
    }

    #[test]
    fn zero_rows_become_uniform() {
        let t = TransitionMatrix::from_rows(&[vec![0, 5], vec![0, 0]], 2).unwrap();
        let chain = damped_chain(&t, 0.0);
        assert_eq!(chain, vec![vec![0.0, 1.0], vec![0.5, 0.5]]);
        let damped = damped_chain(&t, 0.2);
        assert_abs_diff_eq!(damped[0][0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(damped[0][1], 0.9, epsilon = 1e-15);
    }
}
