//! Reference computations shared by the oracle and acceptance targets.

#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use cpath::{CounterfactualPath, PathSet, TransitionMatrix};

pub fn random_path_set<R: Rng>(rng: &mut R) -> PathSet {
    let p = rng.random_range(1..=6);
    let k = rng.random_range(1..=5);
    let count = rng.random_range(0..=12);
    let paths = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=k);
            let vertices: Vec<usize> = (0..len).map(|_| rng.random_range(0..p)).collect();
            CounterfactualPath {
                swap_trace: (0..len).map(|_| rng.random::<f64>()).collect(),
                vertices,
                triggered: true,
            }
        })
        .collect();
    PathSet {
        paths,
        n_iter: count + 3,
        k,
        n_features: p,
        untriggered: 3,
    }
}

/// Sparse accumulation keyed by arc.
pub fn brute_force(set: &PathSet) -> HashMap<(usize, usize), u64> {
    let mut arcs = HashMap::new();
    for path in &set.paths {
        let weight = (set.k + 1 - path.vertices.len()) as u64;
        let v = &path.vertices;
        if v.len() == 1 {
            *arcs.entry((v[0], v[0])).or_insert(0) += weight;
        }
        let mut i = 0;
        while i + 1 < v.len() {
            *arcs.entry((v[i], v[i + 1])).or_insert(0) += weight;
            i += 1;
        }
    }
    arcs
}

pub fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Row-normalized chain with empty rows made uniform, built directly.
pub fn reference_chain(t: &TransitionMatrix) -> DMatrix<f64> {
    let p = t.p();
    DMatrix::from_fn(p, p, |i, j| {
        let row: u64 = (0..p).map(|c| t.get(i, c)).sum();
        if row == 0 {
            1.0 / p as f64
        } else {
            t.get(i, j) as f64 / row as f64
        }
    })
}

/// A nonnegative matrix is primitive iff some power up to
/// `(p − 1)² + 1` is entrywise positive.
pub fn is_primitive(chain: &DMatrix<f64>) -> bool {
    let p = chain.nrows();
    let pattern = chain.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut power = pattern.clone();
    for _ in 0..(p - 1) * (p - 1) {
        power = (&power * &pattern).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    power.iter().all(|&v| v > 0.0)
}

/// Solves `πᵀ(P − I) = 0` with one equation replaced by `Σπ = 1`.
pub fn dense_stationary(chain: &DMatrix<f64>) -> DVector<f64> {
    let p = chain.nrows();
    let mut a = chain.transpose() - DMatrix::identity(p, p);
    let mut b = DVector::zeros(p);
    for j in 0..p {
        a[(p - 1, j)] = 1.0;
    }
    b[p - 1] = 1.0;
    a.lu().solve(&b).expect("irreducible chain has a unique stationary law")
}
