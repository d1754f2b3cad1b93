//! The unweighted feature graph that path sampling walks on.
//!
//! Without domain knowledge every ordered feature pair is an arc and walks
//! never revisit a feature. With a knowledge graph, walks follow declared
//! arcs only and may return to features they already permuted.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Complete,
    Knowledge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGraph {
    adjacency: Vec<Vec<usize>>,
    mode: GraphMode,
}

impl FeatureGraph {
    /// Complete digraph on `p` vertices.
    pub fn complete(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        let adjacency = (0..p)
            .map(|i| (0..p).filter(|&j| j != i).collect())
            .collect();
        Ok(FeatureGraph {
            adjacency,
            mode: GraphMode::Complete,
        })
    }

    /// Knowledge graph from undirected edges; each becomes a pair of arcs.
    /// Duplicate edges collapse; self-loops are rejected.
    pub fn from_undirected_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        if edges.is_empty() {
            return Err(Error::InvalidGraph("knowledge graph has no edges".into()));
        }
        let mut sets = vec![BTreeSet::new(); p];
        for &(a, b) in edges {
            if a >= p || b >= p {
                return Err(Error::InvalidGraph(format!("edge ({a}, {b}) exceeds {p} vertices")));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {a}")));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(FeatureGraph {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            mode: GraphMode::Knowledge,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_arc(&self, from: usize, to: usize) -> bool {
        self.adjacency
            .get(from)
            .is_some_and(|n| n.binary_search(&to).is_ok())
    }

    pub fn n_arcs(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Undirected edges `(a, b)` with `a < b`, for symmetric graphs.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_vertices()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].expect("queued vertices are reached");
            for &w in &self.adjacency[v] {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.bfs(0).iter().all(Option::is_some)
    }

    /// Longest shortest path, or `None` when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut best = 0;
        for v in 0..self.n_vertices() {
            for d in self.bfs(v) {
                best = best.max(d?);
            }
        }
        Some(best)
    }

    /// Uniform draw over all vertices.
    pub fn sample_start_vertex<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.n_vertices())
    }

    /// Next step of a walk from `current`.
    ///
    /// Complete graphs draw uniformly among unvisited vertices; knowledge
    /// graphs draw uniformly among the out-neighbors of `current`, visited
    /// or not. `None` means the walk cannot continue.
    pub fn sample_next_vertex<R: Rng + ?Sized>(
        &self,
        current: usize,
        visited: &[bool],
        rng: &mut R,
    ) -> Option<usize> {
        match self.mode {
            GraphMode::Complete => {
                let remaining = visited.iter().filter(|&&v| !v).count();
                if remaining == 0 {
                    return None;
                }
                let pick = rng.random_range(0..remaining);
                visited
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| !v)
                    .nth(pick)
                    .map(|(i, _)| i)
            }
            GraphMode::Knowledge => {
                let ns = &self.adjacency[current];
                if ns.is_empty() {
                    None
                } else {
                    Some(ns[rng.random_range(0..ns.len())])
                }
            }
        }
    }
}

/// Reads a `source,target` edge list naming columns of the dataset. A
/// leading `source,target` header line is skipped.
pub fn load_knowledge_graph(path: &Path, columns: &[String]) -> Result<FeatureGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_knowledge_graph(&text, columns)
}

pub fn parse_knowledge_graph(text: &str, columns: &[String]) -> Result<FeatureGraph> {
    let lookup: HashMap<&str, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidGraph(format!("line {}: expected source,target", lineno + 1)))?;
        let (a, b) = (a.trim(), b.trim());
        if lineno == 0 && a == "source" && b == "target" {
            continue;
        }
        let ia = *lookup.get(a).ok_or_else(|| Error::UnknownFeature(a.to_owned()))?;
        let ib = *lookup.get(b).ok_or_else(|| Error::UnknownFeature(b.to_owned()))?;
        edges.push((ia, ib));
    }
    FeatureGraph::from_undirected_edges(columns.len(), &edges)
}

/// Writes a graph as a `source,target` edge list, one line per undirected
/// edge.
pub fn format_edge_list(graph: &FeatureGraph, columns: &[String]) -> String {
    let mut out = String::from("source,target\n");
    for (a, b) in graph.undirected_edges() {
        out.push_str(&format!("{},{}\n", columns[a], columns[b]));
    }
    out
}

/// Barabási–Albert preferential attachment.
///
/// Vertices `0..=m` start as a clique; every later vertex attaches to `m`
/// distinct earlier vertices drawn with probability proportional to their
/// current degree. The result has `m(m+1)/2 + (n−m−1)·m` undirected edges.
pub fn barabasi_graph<R: Rng + ?Sized>(n_vertices: usize, m: usize, rng: &mut R) -> Result<FeatureGraph> {
    if m < 1 || n_vertices <= m {
        return Err(Error::InvalidConfig(format!(
            "barabasi graph needs n > m >= 1 (n = {n_vertices}, m = {m})"
        )));
    }
    let mut edges = Vec::new();
    // every edge endpoint once; uniform draws from it are degree-proportional
    let mut endpoints: Vec<usize> = Vec::new();
    for a in 0..=m {
        for b in (a + 1)..=m {
            edges.push((a, b));
            endpoints.extend([a, b]);
        }
    }
    for v in (m + 1)..n_vertices {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    FeatureGraph::from_undirected_edges(n_vertices, &edges)
}
